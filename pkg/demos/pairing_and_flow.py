"""
Jacobian flow, its inverse adjoint and the pairing between them
===============================================================
"""

import numpy as np

from hjm_hypo import SimConfig, flow_property_residual, pairing_residual, simulate_path
from hjm_hypo.config import bundled_config, load_config

exp = load_config(bundled_config("scalar_gate"))
cfg = SimConfig(1.0, record_jacobian=True, jacobian_mode="full")
bundle = simulate_path(exp.model, exp.r0, cfg, seed=0)

rng = np.random.default_rng(0)
h, y = rng.standard_normal((2, exp.grid.n_points))
res = pairing_residual(bundle, h, y)
print("max pairing drift / (|h||y|):", res.max() / (exp.grid.norm(h) * exp.grid.norm(y)))

for s, t in [(0, 16), (4, 12), (10, 11)]:
    print(f"flow property residual s={s} t={t}:", flow_property_residual(bundle, s, t, h))
