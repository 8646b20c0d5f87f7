"""
Monte Carlo yields against the exact Gaussian law
=================================================

For an additive volatility with zero drift the yields at time t are jointly
Gaussian with a covariance given by a one-dimensional integral.
"""

import numpy as np

from hjm_hypo import compare_cov, gaussian_mean_cov, gaussianity_check, map_paths, mc_moments, simulate_path
from hjm_hypo.config import bundled_config, load_config

exp = load_config(bundled_config("additive_bump"))
rows = np.array([f.row(exp.grid) for f in exp.functionals])
n = 2000

vals = np.array(map_paths(lambda i: rows @ simulate_path(exp.model, exp.r0, exp.sim, 1, i).states[-1], n, 4))
mean, cov = gaussian_mean_cov(exp.model, exp.r0, exp.functionals, exp.sim.t_end)
m = mc_moments(vals)

np.set_printoptions(precision=4, suppress=True)
print("exact mean ", mean)
print("MC mean    ", m.mean, "+/-", m.standard_errors)
print("exact cov\n", cov)
print("MC cov\n", m.cov)
cmp = compare_cov(m.cov, cov, n, z_crit=4.0)
print(f"relative Frobenius error {cmp.rel_frobenius:.3%}, max |z| {np.abs(cmp.z_scores).max():.2f}")
print("moment flags", gaussianity_check(vals).flags)
