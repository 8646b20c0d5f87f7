"""
Independent reference computations.

Nothing here calls the simulator's time stepping except
:func:`fd_jacobian_action`, which differentiates whole simulated flows by
central differences and so checks the variational recursion from outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import simpson
from scipy.stats import norm

from .fields import AdditiveField, DriftMode, FieldModel
from .grid import Curve, Grid, LinearFunctional
from .sim import SimConfig, step

__all__ = [
    "gaussian_mean_cov",
    "fd_jacobian_action",
    "Moments",
    "mc_moments",
    "CovComparison",
    "compare_cov",
    "GaussianityReport",
    "gaussianity_check",
]


def _transported(grid: Grid, f: AdditiveField, u: float) -> np.ndarray:
    """(T_u h)(x_i) for a continuous shift u, from the analytic profile when known."""
    x = grid.x + u
    if grid.periodic:
        x = grid.x_min + np.mod(x - grid.x_min, grid.x_max - grid.x_min)
    else:
        x = np.minimum(x, grid.x_max)
    if f.func is not None:
        return np.asarray(f.func(x), dtype=float) * np.ones(grid.n_points)
    if grid.periodic:
        return np.interp(x, grid.x, f.profile, period=grid.x_max - grid.x_min)
    return np.interp(x, grid.x, f.profile)


def gaussian_mean_cov(
    model: FieldModel,
    r0,
    functionals: Sequence[LinearFunctional],
    t: float,
    substeps: Optional[int] = None,
):
    """
    Law of (l_1(r_t), ..., l_k(r_t)) for dr = A r dt + sum_i h_i dB^i.

    Mean: l(T_t r0).  Covariance: sum_i int_0^t l_a(T_u h_i) l_b(T_u h_i) du by
    composite Simpson with ``substeps`` intervals (default max(20 * t/dx, 400),
    rounded up to even).
    """
    if model.drift_mode is not DriftMode.ZERO or not all(isinstance(f, AdditiveField) for f in model.sigmas):
        raise ValueError("the Gaussian oracle needs an additive model with zero drift")
    g = model.grid
    r0 = r0.values if isinstance(r0, Curve) else np.asarray(r0, dtype=float)
    rows = np.array([f.row(g) for f in functionals])
    mean = rows @ g.shift(r0, t)
    k = len(functionals)
    if t == 0:
        return mean, np.zeros((k, k))
    if substeps is None:
        substeps = max(20 * int(round(t / g.dx)), 400)
    substeps += substeps % 2
    us = np.linspace(0.0, t, substeps + 1)
    cov = np.zeros((k, k))
    for f in model.sigmas:
        vals = np.array([rows @ _transported(g, f, u) for u in us])  # (nu, k)
        prod = vals[:, :, None] * vals[:, None, :]
        cov += simpson(prod, x=us, axis=0)
    return mean, 0.5 * (cov + cov.T)


def fd_jacobian_action(
    model: FieldModel,
    r0,
    noise: np.ndarray,
    h,
    eps: float = 1e-4,
    cfg: Optional[SimConfig] = None,
) -> np.ndarray:
    """Central difference of the terminal curve along h, with the recorded increments reused."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    g = model.grid
    noise = np.asarray(noise, dtype=float).reshape(-1, model.d)
    if cfg is None:
        cfg = SimConfig(t_end=len(noise) * g.dx)
    r0 = r0.values if isinstance(r0, Curve) else np.asarray(r0, dtype=float)
    h = h.values if isinstance(h, Curve) else np.asarray(h, dtype=float)

    def flow(r):
        for dw in noise:
            r = step(model, r, dw, cfg)
        return r

    return (flow(r0 + eps * h) - flow(r0 - eps * h)) / (2 * eps)


@dataclass(frozen=True)
class Moments:
    mean: np.ndarray
    cov: np.ndarray
    standard_errors: np.ndarray
    n: int


def mc_moments(samples) -> Moments:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / (n - 1)
    return Moments(mean, cov, np.sqrt(np.diag(cov) / n), n)


@dataclass(frozen=True)
class CovComparison:
    rel_frobenius: float
    z_scores: np.ndarray
    z_crit: float
    flagged: tuple
    passed: bool

    def to_dict(self) -> dict:
        return {
            "rel_frobenius": self.rel_frobenius,
            "z_scores": self.z_scores.tolist(),
            "max_abs_z": float(np.max(np.abs(self.z_scores))) if self.z_scores.size else 0.0,
            "z_crit": self.z_crit,
            "flagged": [list(p) for p in self.flagged],
            "passed": self.passed,
        }


def compare_cov(
    mc_cov,
    oracle_cov,
    n_paths: int,
    percentile: float = 0.95,
    z_crit: Optional[float] = None,
    frob_tol: float = math.inf,
) -> CovComparison:
    """
    Entrywise z-scores of a sample covariance against a reference, using the
    Gaussian approximation Var(S_ab) = (C_aa C_bb + C_ab^2) / (n - 1).

    Entries beyond the two-sided ``percentile`` critical value (or ``z_crit``
    when given) are flagged; the comparison passes when nothing is flagged and
    the relative Frobenius error is within ``frob_tol``.
    """
    mc = np.asarray(mc_cov, dtype=float)
    ref = np.asarray(oracle_cov, dtype=float)
    if mc.shape != ref.shape:
        raise ValueError(f"shape mismatch {mc.shape} vs {ref.shape}")
    if z_crit is None:
        z_crit = float(norm.ppf(0.5 + percentile / 2))
    diff = mc - ref
    nref = np.linalg.norm(ref)
    if nref > 0:
        rel = float(np.linalg.norm(diff) / nref)
    else:
        rel = 0.0 if np.linalg.norm(diff) == 0 else math.inf
    d = np.diag(ref)
    var = (np.outer(d, d) + ref**2) / max(n_paths - 1, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(var > 0, diff / np.sqrt(var), np.where(diff == 0, 0.0, np.inf))
    flagged = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(np.abs(z) > z_crit)) if i <= j)
    return CovComparison(rel, z, z_crit, flagged, not flagged and rel <= frob_tol)


@dataclass(frozen=True)
class GaussianityReport:
    n: int
    skewness: np.ndarray
    excess_kurtosis: np.ndarray
    se_skew: float
    se_kurt: float
    flags: np.ndarray
    degenerate: np.ndarray
    warnings: tuple

    @property
    def any_flag(self) -> bool:
        return bool(np.any(self.flags))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "skewness": self.skewness.tolist(),
            "excess_kurtosis": self.excess_kurtosis.tolist(),
            "se_skew": self.se_skew,
            "se_kurt": self.se_kurt,
            "flags": self.flags.tolist(),
            "degenerate": self.degenerate.tolist(),
            "warnings": list(self.warnings),
        }


def gaussianity_check(samples, n_se: float = 4.0) -> GaussianityReport:
    """Moment-based normality flags: |skew| or |excess kurtosis| beyond ``n_se`` standard errors."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 100:
        raise ValueError("gaussianity check needs at least 100 samples")
    c = x - x.mean(axis=0)
    m2 = np.mean(c**2, axis=0)
    degenerate = m2 <= 1e-30 * np.maximum(np.mean(x**2, axis=0), 1e-300)
    safe = np.where(degenerate, 1.0, m2)
    skew = np.where(degenerate, 0.0, np.mean(c**3, axis=0) / safe**1.5)
    kurt = np.where(degenerate, 0.0, np.mean(c**4, axis=0) / safe**2 - 3.0)
    se_s, se_k = math.sqrt(6.0 / n), math.sqrt(24.0 / n)
    flags = (np.abs(skew) > n_se * se_s) | (np.abs(kurt) > n_se * se_k)
    warns = tuple(f"coordinate {i} has zero variance" for i in np.nonzero(degenerate)[0])
    return GaussianityReport(n, skew, kurt, se_s, se_k, flags, degenerate, warns)
