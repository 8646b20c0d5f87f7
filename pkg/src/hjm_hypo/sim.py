"""
Time integration of the curve dynamics and of its first-variation flows.

One step over dt = dx splits into a local substep (drift and noise, computed
from the current curve) and the exact shift by one grid node.  With
``splitting="lie"`` the whole increment is transported:

    r+ = S (r + inc(r, dW))

With ``splitting="trapezoid"`` half the increment is transported and half is
added after the shift, which samples the transported noise at both ends of the
step:

    r+ = S (r + inc/2) + inc/2

``inc`` is Euler-Maruyama for ``scheme="ito"`` and a Heun predictor-corrector on
the Stratonovich form for ``scheme="heun"``; both target the same law.

The first variation of a step is the linear map P = S (I + E) (Lie) or
P = S (I + E/2) + E/2 (trapezoid), with E the derivative of the increment.
Jacobian actions, their transposes and the exact discrete inverse-adjoint flow
are all built from these per-step maps.
"""

from __future__ import annotations

import enum
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg

from .fields import (
    FieldModel,
    drift,
    drift_deriv,
    nonlocal_drift_deriv,
    nonlocal_drift_part,
)
from .grid import Curve, Grid, L2Grid, Metric, parse_metric

__all__ = [
    "Scheme",
    "Splitting",
    "JacobianMode",
    "SimConfig",
    "PathBundle",
    "StepMap",
    "SingularStepError",
    "brownian_increments",
    "coarsen_increments",
    "increment",
    "step",
    "step_map",
    "step_maps",
    "simulate_path",
    "map_paths",
    "propagate_jacobian",
    "propagate_jacobian_transpose",
    "propagate_inverse_adjoint",
    "flow_property_residual",
    "pairing_residual",
    "step_condition_numbers",
]

SINGULAR_COND = 1e12


class Scheme(str, enum.Enum):
    ITO = "ito"
    HEUN = "heun"


class Splitting(str, enum.Enum):
    LIE = "lie"
    TRAPEZOID = "trapezoid"


class JacobianMode(str, enum.Enum):
    FULL = "full"
    BASIS = "basis"


class SingularStepError(ArithmeticError):
    def __init__(self, step: int, cond: float):
        super().__init__(
            f"step {step}: step map is numerically singular (cond={cond:.3g}); "
            "dt is too large for the field's Lipschitz scale or the grid is not periodic"
        )
        self.step = step
        self.cond = cond


@dataclass(frozen=True, eq=False)
class SimConfig:
    t_end: float
    dt: Optional[float] = None
    scheme: Scheme = Scheme.ITO
    splitting: Splitting = Splitting.LIE
    record_jacobian: bool = False
    record_inverse_adjoint: bool = False
    jacobian_mode: JacobianMode = JacobianMode.BASIS
    basis: tuple = ()
    metric: Metric = field(default_factory=L2Grid)

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "splitting", Splitting(self.splitting))
        object.__setattr__(self, "jacobian_mode", JacobianMode(self.jacobian_mode))
        object.__setattr__(self, "metric", parse_metric(self.metric))
        object.__setattr__(
            self, "basis", tuple(b.values if isinstance(b, Curve) else np.asarray(b, float) for b in self.basis)
        )
        if not self.t_end >= 0:
            raise ValueError("t_end must be >= 0")

    def steps(self, grid: Grid) -> int:
        dt = grid.dx if self.dt is None else self.dt
        if abs(dt - grid.dx) > 1e-9 * grid.dx:
            raise ValueError(f"dt={dt} must equal the grid spacing dx={grid.dx}")
        k = self.t_end / grid.dx
        n = int(round(k))
        if abs(k - n) > 1e-9 * max(1.0, k):
            raise ValueError(f"t_end={self.t_end} is not a multiple of dt={grid.dx}")
        return n

    def to_dict(self) -> dict:
        return {
            "t_end": self.t_end,
            "dt": self.dt,
            "scheme": self.scheme.value,
            "splitting": self.splitting.value,
            "record_jacobian": self.record_jacobian,
            "record_inverse_adjoint": self.record_inverse_adjoint,
            "jacobian_mode": self.jacobian_mode.value,
            "n_basis": len(self.basis),
            "metric": self.metric.name,
        }


# -- noise -----------------------------------------------------------------------


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based stream keyed by (master seed, path index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(path_index)])))


def brownian_increments(seed: int, path_index: int, steps: int, d: int, dt: float) -> np.ndarray:
    return path_rng(seed, path_index).standard_normal((steps, d)) * np.sqrt(dt)


def coarsen_increments(noise: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` increments (same Brownian path, coarser dt)."""
    noise = np.asarray(noise)
    steps, d = noise.shape
    if steps % factor:
        raise ValueError("number of steps is not divisible by factor")
    return noise.reshape(steps // factor, factor, d).sum(axis=1)


# -- one step ----------------------------------------------------------------------


def _noise_term(model: FieldModel, r: np.ndarray, dW: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    for f, dw in zip(model.sigmas, dW):
        out = out + f.value(r) * dw
    return out


def increment(model: FieldModel, r: np.ndarray, dW: np.ndarray, dt: float, scheme: Scheme) -> np.ndarray:
    """Local (non-transport) increment over one step."""
    if scheme is Scheme.ITO:
        return drift(model, r) * dt + _noise_term(model, r, dW)
    b0 = nonlocal_drift_part(model, r)
    n0 = _noise_term(model, r, dW)
    pred = r + b0 * dt + n0
    return 0.5 * (b0 + nonlocal_drift_part(model, pred)) * dt + 0.5 * (n0 + _noise_term(model, pred, dW))


def _combine(grid: Grid, r: np.ndarray, inc: np.ndarray, splitting: Splitting) -> np.ndarray:
    if splitting is Splitting.LIE:
        return grid.shift_steps(r + inc, 1)
    return grid.shift_steps(r + 0.5 * inc, 1) + 0.5 * inc


def step(model: FieldModel, r, dW, cfg: SimConfig) -> np.ndarray:
    """Advance one curve by dt = dx."""
    r = r.values if isinstance(r, Curve) else np.asarray(r, dtype=float)
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if dW.shape != (model.d,) or not np.all(np.isfinite(dW)):
        raise ValueError("dW must be a finite vector of length d")
    g = model.grid
    return _combine(g, r, increment(model, r, dW, g.dx, cfg.scheme), cfg.splitting)


def _increment_jacobian(model: FieldModel, r: np.ndarray, dW: np.ndarray, dt: float, scheme: Scheme, v: np.ndarray):
    def noise_deriv(x, vv):
        out = np.zeros_like(vv)
        for f, dw in zip(model.sigmas, dW):
            if not f.state_independent:
                out = out + f.deriv(x, vv) * dw
        return out

    if scheme is Scheme.ITO:
        return drift_deriv(model, r, v) * dt + noise_deriv(r, v)
    pred = r + nonlocal_drift_part(model, r) * dt + _noise_term(model, r, dW)
    db0 = nonlocal_drift_deriv(model, r, v)
    dn0 = noise_deriv(r, v)
    vt = v + db0 * dt + dn0
    return 0.5 * (db0 + nonlocal_drift_deriv(model, pred, vt)) * dt + 0.5 * (dn0 + noise_deriv(pred, vt))


@dataclass(eq=False)
class StepMap:
    """Linearization P of one step: a shift combined with I + E."""

    grid: Grid
    splitting: Splitting
    E: Optional[np.ndarray]  # None for state-independent models
    index: int = 0

    def apply(self, v: np.ndarray) -> np.ndarray:
        g = self.grid
        if self.E is None:
            return g.shift_steps(v, 1)
        ev = self.E @ v
        if self.splitting is Splitting.LIE:
            return g.shift_steps(v + ev, 1)
        return g.shift_steps(v + 0.5 * ev, 1) + 0.5 * ev

    def apply_T(self, w: np.ndarray) -> np.ndarray:
        g = self.grid
        sw = g.shift_transpose_steps(w, 1)
        if self.E is None:
            return sw
        if self.splitting is Splitting.LIE:
            return sw + self.E.T @ sw
        return sw + 0.5 * (self.E.T @ (sw + w))

    @cached_property
    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(self.grid.n_points))

    @cached_property
    def _lu(self):
        c = self.cond()
        if not np.isfinite(c) or c > SINGULAR_COND:
            raise SingularStepError(self.index, c)
        return scipy.linalg.lu_factor(self.matrix)

    def _pure_shift_invertible(self) -> bool:
        return self.E is None and self.grid.periodic

    def cond(self) -> float:
        if self._pure_shift_invertible():
            return 1.0
        return float(np.linalg.cond(self.matrix))

    def solve(self, v: np.ndarray) -> np.ndarray:
        """P^-1 v"""
        if self._pure_shift_invertible():
            return self.grid.shift_steps(v, -1)
        return scipy.linalg.lu_solve(self._lu, v)

    def solve_T(self, w: np.ndarray) -> np.ndarray:
        """P^-T w"""
        if self._pure_shift_invertible():
            return self.grid.shift_steps(w, 1)
        return scipy.linalg.lu_solve(self._lu, w, trans=1)


def step_map(model: FieldModel, r: np.ndarray, dW: np.ndarray, cfg: SimConfig, index: int = 0) -> StepMap:
    g = model.grid
    if model.state_independent:
        return StepMap(g, cfg.splitting, None, index)
    E = _increment_jacobian(model, r, np.atleast_1d(dW), g.dx, cfg.scheme, np.eye(g.n_points))
    return StepMap(g, cfg.splitting, E, index)


# -- paths -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathBundle:
    """
    One simulated trajectory.

    ``states[k]`` is the curve at ``times[k]``; ``noise[k]`` holds the Brownian
    increments of step k.  Optional records: ``step_matrices`` (full step maps
    P_k), ``jac`` (J_{0->k} applied to ``config.basis``, shape
    ``(steps+1, m, n)``) and ``inv_adj`` (inverse-adjoint flow of the basis).
    """

    grid: Grid
    times: np.ndarray
    states: np.ndarray
    noise: np.ndarray
    seed: int
    path_index: int
    config: SimConfig
    step_matrices: Optional[np.ndarray] = None
    jac: Optional[np.ndarray] = None
    inv_adj: Optional[np.ndarray] = None

    @property
    def steps(self) -> int:
        return len(self.noise)

    def curve(self, k: int) -> Curve:
        return Curve(self.grid, self.states[k])

    def save(self, directory: Union[str, Path]) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "states.csv", self.states, delimiter=",", fmt="%.17g")
        np.savetxt(d / "noise.csv", self.noise.reshape(len(self.noise), -1), delimiter=",", fmt="%.17g")
        meta = {
            "seed": self.seed,
            "path_index": self.path_index,
            "grid": self.grid.to_dict(),
            "config": self.config.to_dict(),
            "scheme": self.config.scheme.value,
            "times": self.times.tolist(),
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "PathBundle":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        grid = Grid(**meta["grid"])
        c = meta["config"]
        cfg = SimConfig(
            t_end=c["t_end"], dt=c["dt"], scheme=c["scheme"], splitting=c["splitting"], metric=c["metric"]
        )
        states = np.atleast_2d(np.loadtxt(d / "states.csv", delimiter=","))
        noise = np.loadtxt(d / "noise.csv", delimiter=",", ndmin=2)
        if noise.size == 0:
            noise = noise.reshape(0, 1)
        return cls(grid, np.array(meta["times"]), states, noise, meta["seed"], meta["path_index"], cfg)


def simulate_path(
    model: FieldModel,
    r0,
    cfg: SimConfig,
    seed: int = 0,
    path_index: int = 0,
    noise: Optional[np.ndarray] = None,
) -> PathBundle:
    """
    Simulate one path.  Increments come from the stream keyed by
    ``(seed, path_index)`` unless ``noise`` (shape ``(steps, d)``) is given.
    """
    g = model.grid
    r0 = r0.values if isinstance(r0, Curve) else np.asarray(r0, dtype=float)
    if r0.shape != (g.n_points,):
        raise ValueError("initial curve does not match the model grid")
    n_steps = cfg.steps(g)
    if noise is None:
        noise = brownian_increments(seed, path_index, n_steps, model.d, g.dx)
    noise = np.asarray(noise, dtype=float).reshape(n_steps, model.d)

    states = np.empty((n_steps + 1, g.n_points))
    states[0] = r0
    for k in range(n_steps):
        states[k + 1] = step(model, states[k], noise[k], cfg)
    if not np.all(np.isfinite(states)):
        raise FloatingPointError("non-finite curve values during simulation")
    times = g.dx * np.arange(n_steps + 1)
    bundle = PathBundle(g, times, states, noise, seed, path_index, cfg)

    if not (cfg.record_jacobian or cfg.record_inverse_adjoint):
        return bundle
    if cfg.record_inverse_adjoint and not g.periodic:
        warnings.warn("flat-extrapolated grids have a non-invertible shift; inverse flows will fail", stacklevel=2)
    maps = step_maps(model, bundle)
    extra = {}
    if cfg.jacobian_mode is JacobianMode.FULL:
        extra["step_matrices"] = np.array([m.matrix for m in maps])
    if cfg.basis:
        if cfg.record_jacobian:
            extra["jac"] = np.stack([_forward(maps, b) for b in cfg.basis], axis=1)
        if cfg.record_inverse_adjoint:
            extra["inv_adj"] = np.stack([_inverse_adjoint(maps, b, cfg.metric) for b in cfg.basis], axis=1)
    return replace(bundle, **extra)


def map_paths(
    fn: Callable[[int], object],
    n_paths: int,
    workers: int = 1,
) -> list:
    """
    Evaluate ``fn(path_index)`` for every path, returning results in path order.

    Each path draws its own stream, so results do not depend on ``workers``.
    """
    if workers <= 1:
        return [fn(i) for i in range(n_paths)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(n_paths)))


# -- flows -----------------------------------------------------------------------


def step_maps(model: FieldModel, bundle: PathBundle, upto: Optional[int] = None) -> list:
    n = bundle.steps if upto is None else upto
    if bundle.step_matrices is not None and bundle.config.jacobian_mode is JacobianMode.FULL:
        return [_MatrixStep(bundle.grid, p, k) for k, p in enumerate(bundle.step_matrices[:n])]
    return [step_map(model, bundle.states[k], bundle.noise[k], bundle.config, k) for k in range(n)]


class _MatrixStep(StepMap):
    def __init__(self, grid: Grid, matrix: np.ndarray, index: int):
        super().__init__(grid, Splitting.LIE, None, index)
        self.__dict__["matrix"] = matrix

    def apply(self, v):
        return self.matrix @ v

    def apply_T(self, w):
        return self.matrix.T @ w

    def _pure_shift_invertible(self):
        return False


def _forward(maps: Sequence[StepMap], h: np.ndarray) -> np.ndarray:
    out = np.empty((len(maps) + 1,) + h.shape)
    out[0] = h
    for k, m in enumerate(maps):
        out[k + 1] = m.apply(out[k])
    return out


def _metric_gram(grid: Grid, metric: Metric) -> Optional[np.ndarray]:
    if isinstance(metric, L2Grid):
        return None
    gram = grid.gram(metric)
    if np.linalg.cond(gram) > SINGULAR_COND:
        raise ValueError("metric Gram matrix is singular on this grid (use L2 or an odd periodic grid)")
    return gram


def _inverse_adjoint(maps: Sequence[StepMap], y: np.ndarray, metric: Metric) -> np.ndarray:
    gram = _metric_gram(maps[0].grid, metric) if maps else None
    out = np.empty((len(maps) + 1,) + y.shape)
    out[0] = y
    for k, m in enumerate(maps):
        if gram is None:
            out[k + 1] = m.solve_T(out[k])
        else:
            out[k + 1] = np.linalg.solve(gram, m.solve_T(gram @ out[k]))
    return out


def propagate_jacobian(model: FieldModel, bundle: PathBundle, h, upto: Optional[int] = None) -> np.ndarray:
    """J_{0->k} h for k = 0..steps, same splitting and noise as the path."""
    h = h.values if isinstance(h, Curve) else np.asarray(h, dtype=float)
    if h.shape[0] != bundle.grid.n_points:
        raise ValueError("direction does not match the bundle grid")
    return _forward(step_maps(model, bundle, upto), h)


def propagate_jacobian_transpose(maps: Sequence[StepMap], w: np.ndarray, start: int, stop: int) -> np.ndarray:
    """(P_{stop-1} ... P_start)^T w"""
    for m in reversed(maps[start:stop]):
        w = m.apply_T(w)
    return w


def propagate_inverse_adjoint(
    model: FieldModel,
    bundle: PathBundle,
    y,
    metric: Optional[Metric] = None,
    mode: str = "exact",
) -> np.ndarray:
    """
    (J_{0->k}^{-1})^* y for k = 0..steps.

    ``mode="exact"`` inverts each discrete step map (linear solves), so the
    pairing with the Jacobian flow is conserved to round-off.  ``mode="heun"``
    integrates the adjoint Stratonovich equation directly with a
    predictor-corrector substep followed by the inverse-adjoint shift; it agrees
    with the exact flow to first order in dt.
    """
    y = y.values if isinstance(y, Curve) else np.asarray(y, dtype=float)
    metric = parse_metric(metric) if metric is not None else bundle.config.metric
    if mode == "exact":
        return _inverse_adjoint(step_maps(model, bundle), y, metric)
    if mode == "heun":
        return _inverse_adjoint_heun(model, bundle, y, metric)
    raise ValueError(f"unknown mode {mode!r}")


def _inverse_adjoint_heun(model: FieldModel, bundle: PathBundle, y: np.ndarray, metric: Metric) -> np.ndarray:
    g = bundle.grid
    cfg = bundle.config
    if not g.periodic:
        raise ValueError("the adjoint equation needs a periodic grid")
    if cfg.splitting is not Splitting.LIE:
        raise ValueError("literal adjoint integration is implemented for Lie splitting")
    gram = _metric_gram(g, metric)
    eye = np.eye(g.n_points)

    def adj(mat):
        return mat.T if gram is None else np.linalg.solve(gram, mat.T @ gram)

    def coeff(r, dW):
        # linear map m -> -(Dbeta(r)^* m dt + sum_i Dsigma_i(r)^* m dW_i)
        c = nonlocal_drift_deriv(model, r, eye) * g.dx
        for f, dw in zip(model.sigmas, dW):
            if not f.state_independent:
                c = c + f.deriv(r, eye) * dw
        return -adj(c)

    shift_adj = adj(g.shift_matrix(1))
    shift_adj_inv = np.linalg.inv(shift_adj)
    out = np.empty((bundle.steps + 1, g.n_points))
    out[0] = y
    for k in range(bundle.steps):
        r, dW = bundle.states[k], bundle.noise[k]
        r_hat = r + increment(model, r, dW, g.dx, cfg.scheme)
        f0 = coeff(r, dW)
        m = out[k]
        m_pred = m + f0 @ m
        m_new = m + 0.5 * (f0 @ m + coeff(r_hat, dW) @ m_pred)
        out[k + 1] = shift_adj_inv @ m_new
    return out


def step_condition_numbers(model: FieldModel, bundle: PathBundle) -> np.ndarray:
    return np.array([m.cond() for m in step_maps(model, bundle)])


def _require_matrices(bundle: PathBundle) -> np.ndarray:
    if bundle.step_matrices is None:
        raise ValueError("bundle has no full step-matrix records (use jacobian_mode='full', record_jacobian=True)")
    return bundle.step_matrices


def flow_property_residual(bundle: PathBundle, s_index: int, t_index: int, probe) -> float:
    """Relative norm of (J_{s->t} - J_{0->t} J_{0->s}^{-1}) probe."""
    mats = _require_matrices(bundle)
    if not 0 <= s_index <= t_index <= len(mats):
        raise ValueError("need 0 <= s_index <= t_index <= steps")
    probe = probe.values if isinstance(probe, Curve) else np.asarray(probe, dtype=float)
    direct = probe.copy()
    for p in mats[s_index:t_index]:
        direct = p @ direct
    z = probe.copy()
    for p in reversed(mats[:s_index]):
        z = np.linalg.solve(p, z)
    for p in mats[:t_index]:
        z = p @ z
    denom = np.linalg.norm(direct)
    return float(np.linalg.norm(direct - z) / denom) if denom > 0 else float(np.linalg.norm(z))


def pairing_residual(bundle: PathBundle, h, y, metric: Optional[Metric] = None) -> np.ndarray:
    """|<J_k h, (J_k^{-1})^* y> - <h, y>| for every step k."""
    mats = _require_matrices(bundle)
    g = bundle.grid
    metric = parse_metric(metric) if metric is not None else bundle.config.metric
    maps = [_MatrixStep(g, p, k) for k, p in enumerate(mats)]
    h = h.values if isinstance(h, Curve) else np.asarray(h, dtype=float)
    y = y.values if isinstance(y, Curve) else np.asarray(y, dtype=float)
    jh = _forward(maps, h)
    my = _inverse_adjoint(maps, y, metric)
    base = g.inner(h, y, metric)
    return np.array([abs(g.inner(a, b, metric) - base) for a, b in zip(jh, my)])
