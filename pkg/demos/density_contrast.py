"""
Densities of yields: bump volatility vs exponential decay
=========================================================

Two models driven by one Brownian motion.  With an exponentially decaying
volatility the curve moves inside a finite-dimensional family and two yields
are locked to each other; with a Gaussian bump they are not.
"""

import numpy as np

from hjm_hypo import (
    SimConfig,
    Yield,
    additive,
    density_verdict,
    exp_decay,
    FieldModel,
    generate_basis,
    hormander_verdict,
    make_grid,
    malliavin_matrix,
    numeric_rank,
    simulate_path,
)

grid = make_grid(-4.0, 16.0, 201, "flat")
r0 = np.full(grid.n_points, 0.03)

bump = FieldModel(grid, [additive(grid, lambda x: np.exp(-x**2 / 2))])
vasicek = FieldModel(grid, [exp_decay(grid, 0.01, 0.5)], drift_mode="hjm")

yields = [Yield(1.0), Yield(5.0)]
for name, model in [("bump", bump), ("exp decay", vasicek)]:
    reports = [malliavin_matrix(model, simulate_path(model, r0, SimConfig(1.0), 1, i), yields) for i in range(50)]
    v = density_verdict(reports)
    rank = numeric_rank(generate_basis(model, r0, 6))
    print(f"{name:10s} min_eig_rel in [{v.min_eig_rel_min:.2e}, {v.min_eig_rel_max:.2e}]  {v.verdict}")
    print(f"{'':10s} bracket ranks {rank.rank_at_depth.tolist()}  {hormander_verdict(rank)}")
