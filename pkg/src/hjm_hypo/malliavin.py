"""
Malliavin covariance of finitely many linear functionals of the curve, the
reduced covariance quadratic form, ensemble density verdicts and the
drift/noise expansion check of m_s = <(J_{0->s}^{-1})^* y, sigma_p(r_s)>.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .brackets import lie_bracket, mu_bracket
from .fields import FieldModel
from .grid import LinearFunctional, Metric, parse_metric
from .sim import PathBundle, propagate_inverse_adjoint, step_maps

__all__ = [
    "MalliavinReport",
    "EnsembleVerdict",
    "ReducedForm",
    "functional_rows",
    "sensitivities",
    "malliavin_matrix",
    "reduced_covariance_form",
    "density_verdict",
    "bracket_expansion_residual",
    "reports_to_json",
]


def functional_rows(functionals: Sequence[LinearFunctional], grid) -> np.ndarray:
    return np.array([f.row(grid) for f in functionals])


def _t_index(bundle: PathBundle, t_index: Optional[int]) -> int:
    K = bundle.steps if t_index is None else int(t_index)
    if not 0 <= K <= bundle.steps:
        raise IndexError(f"t_index {t_index} out of range [0, {bundle.steps}]")
    return K


def sensitivities(model: FieldModel, bundle: PathBundle, rows: np.ndarray, t_index: Optional[int] = None) -> np.ndarray:
    """
    Array ``c[k, p, a] = l_a(J_{k->K} sigma_p(r_k))`` for k < K.

    Computed by pulling the functional rows back through the transposed step
    maps, one sweep per path; equal to forward re-propagation of each
    sigma_p(r_k) from step k.
    """
    K = _t_index(bundle, t_index)
    maps = step_maps(model, bundle, K)
    G = np.asarray(rows, dtype=float).T.copy()
    out = np.zeros((K, model.d, G.shape[1]))
    for k in range(K - 1, -1, -1):
        G = maps[k].apply_T(G)
        r = bundle.states[k]
        for p, f in enumerate(model.sigmas):
            out[k, p] = f.value(r) @ G
    return out


@dataclass(frozen=True, eq=False)
class MalliavinReport:
    functionals: tuple
    gamma: np.ndarray
    eigenvalues: np.ndarray
    min_eig_rel: float
    path_seed: int
    path_index: int
    t: float
    warnings: tuple = ()

    def to_dict(self) -> dict:
        return {
            "functionals": [f.label() for f in self.functionals],
            "gamma": self.gamma.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "min_eig_rel": self.min_eig_rel,
            "path_seed": self.path_seed,
            "path_index": self.path_index,
            "t": self.t,
            "warnings": list(self.warnings),
        }


def _report(functionals, gamma, bundle, K, warn=()) -> MalliavinReport:
    gamma = 0.5 * (gamma + gamma.T)
    eig = np.linalg.eigvalsh(gamma)
    tr = float(np.trace(gamma))
    rel = max(float(eig[0]), 0.0) / tr if tr > 0 else 0.0
    return MalliavinReport(
        tuple(functionals), gamma, eig, rel, bundle.seed, bundle.path_index, float(bundle.times[K]), tuple(warn)
    )


def malliavin_matrix(
    model: FieldModel,
    bundle: PathBundle,
    functionals: Sequence[LinearFunctional],
    t_index: Optional[int] = None,
) -> MalliavinReport:
    """
    gamma^{ab} = sum_p sum_{k<K} l_a(J_{k->K} sigma_p(r_k)) l_b(J_{k->K} sigma_p(r_k)) dt
    (left Riemann sum over steps).
    """
    if bundle.grid != model.grid:
        raise ValueError("bundle and model grids differ")
    K = _t_index(bundle, t_index)
    rows = functional_rows(functionals, model.grid)
    warn = []
    if len(functionals) > 1:
        sv = np.linalg.svd(rows, compute_uv=False)
        if sv[-1] < 1e-10 * sv[0]:
            warn.append(f"functional rows are nearly dependent (cond={sv[0] / max(sv[-1], 1e-300):.3g})")
    c = sensitivities(model, bundle, rows, K).reshape(-1, len(functionals))
    gamma = c.T @ c * model.grid.dx
    return _report(functionals, gamma, bundle, K, warn)


@dataclass(frozen=True)
class ReducedForm:
    value: float
    metric: str


def reduced_covariance_form(
    model: FieldModel,
    bundle: PathBundle,
    y,
    t_index: Optional[int] = None,
    metric: Optional[Metric] = None,
) -> ReducedForm:
    """<y, C_t y> = sum_p sum_{k<K} <(J_{0->k}^{-1})^* y, sigma_p(r_k)>^2 dt"""
    K = _t_index(bundle, t_index)
    metric = parse_metric(metric) if metric is not None else bundle.config.metric
    g = model.grid
    m = propagate_inverse_adjoint(model, bundle, y, metric)
    total = 0.0
    for k in range(K):
        r = bundle.states[k]
        for f in model.sigmas:
            total += g.inner(m[k], f.value(r), metric) ** 2
    return ReducedForm(total * g.dx, metric.name)


@dataclass(frozen=True)
class EnsembleVerdict:
    n_paths: int
    min_eig_rel_min: float
    min_eig_rel_median: float
    min_eig_rel_max: float
    threshold: float
    verdict: str  # DensityPlausible | Degenerate | Mixed

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def density_verdict(reports: Sequence[MalliavinReport], threshold_rel: float = 1e-8) -> EnsembleVerdict:
    """
    ``DensityPlausible`` if every path has min_eig_rel above the threshold,
    ``Degenerate`` if none has, ``Mixed`` otherwise.
    """
    if not reports:
        raise ValueError("no reports")
    labels = {tuple(f.label() for f in r.functionals) for r in reports}
    if len(labels) != 1:
        raise ValueError("reports use different functionals")
    vals = np.array([r.min_eig_rel for r in reports])
    lo, hi = float(vals.min()), float(vals.max())
    if lo > threshold_rel:
        v = "DensityPlausible"
    elif hi < threshold_rel:
        v = "Degenerate"
    else:
        v = "Mixed"
    return EnsembleVerdict(len(vals), lo, float(np.median(vals)), hi, float(threshold_rel), v)


def bracket_expansion_residual(
    model: FieldModel,
    bundle: PathBundle,
    y,
    p: int,
    k: Optional[int] = None,
    scale: str = "rate",
    metric: Optional[Metric] = None,
):
    """
    Per-step mismatch between the increment of m_k = <M_k, sigma_p(r_k)>,
    M_k = (J_{0->k}^{-1})^* y, and its bracket expansion

        <M_k, [sigma_p, mu](r_k)> dt + sum_i <M_k, [sigma_p, sigma_i](r_k)> dB_i,

    with [sigma_p, mu] = -[mu, sigma_p].

    ``scale="increment"`` returns |dm_k - expansion_k|; ``scale="rate"``
    divides by dt, i.e. it compares the difference quotient of m with the
    predicted rate.  Returns one step's value when ``k`` is given, otherwise
    the array over all steps.
    """
    if scale not in ("rate", "increment"):
        raise ValueError("scale must be 'rate' or 'increment'")
    if not 0 <= p < model.d:
        raise IndexError(f"field index {p} out of range")
    metric = parse_metric(metric) if metric is not None else bundle.config.metric
    g = model.grid
    dt = g.dx
    M = propagate_inverse_adjoint(model, bundle, y, metric)
    sp = model.sigmas[p]
    steps = range(bundle.steps) if k is None else [int(k)]
    out = []
    for j in steps:
        r0, r1 = bundle.states[j], bundle.states[j + 1]
        dm = g.inner(M[j + 1], sp.value(r1), metric) - g.inner(M[j], sp.value(r0), metric)
        pred = -g.inner(M[j], mu_bracket(model, sp, r0), metric) * dt
        for i, si in enumerate(model.sigmas):
            pred += g.inner(M[j], lie_bracket(sp, si, r0), metric) * bundle.noise[j, i]
        res = abs(dm - pred)
        out.append(res / dt if scale == "rate" else res)
    return out[0] if k is not None else np.array(out)


def reports_to_json(reports: Sequence[MalliavinReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)
