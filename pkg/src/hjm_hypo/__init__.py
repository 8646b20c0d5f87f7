"""
hjm_hypo: forward-curve SPDE simulation in the moving-frame (time to
maturity) coordinates, with numerical diagnostics for hypoellipticity.

The submodules are

- :mod:`~hjm_hypo.grid`: maturity grids, curves, shifts and linear functionals
- :mod:`~hjm_hypo.fields`: volatility fields, drifts and their derivatives
- :mod:`~hjm_hypo.brackets`: iterated Lie brackets and a rank proxy
- :mod:`~hjm_hypo.sim`: split-step simulation and first-variation flows
- :mod:`~hjm_hypo.malliavin`: Malliavin covariance of functionals
- :mod:`~hjm_hypo.oracles`: closed-form and finite-difference references
- :mod:`~hjm_hypo.h0`: long-rate conservation and zero-long-rate translation
- :mod:`~hjm_hypo.config` and :mod:`~hjm_hypo.cli`: the batch runner
"""

from .grid import *  # noqa: F401,F403
from .fields import *  # noqa: F401,F403
from .sim import *  # noqa: F401,F403
from .brackets import *  # noqa: F401,F403
from .malliavin import *  # noqa: F401,F403
from .oracles import *  # noqa: F401,F403
from .h0 import *  # noqa: F401,F403
from . import brackets, fields, grid, h0, malliavin, oracles, sim

__version__ = "0.1.0"
