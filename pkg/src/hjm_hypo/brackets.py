"""
Iterated Lie brackets of the Stratonovich drift and the volatility fields at
a point, and a numerical-rank proxy for the bracket-generating condition.

Brackets with the drift use the extension

    [mu, V](r) = A V(r) + Dbeta(r).V(r) - DV(r).(A r) - DV(r).beta(r),

where mu(r) = A r + beta(r), so the generator A is only ever applied to
finite-difference-friendly curves.  Depth-0 vectors are the volatilities
themselves; deeper vectors are re-entered as frozen (state-independent)
fields, which is exact for additive models and a first-order approximation
otherwise (flagged in the report).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .fields import (
    Field,
    FieldModel,
    _fd_columns,
    dir_derivative,
    frozen,
    nonlocal_drift_deriv,
    nonlocal_drift_part,
)
from .grid import Curve, Grid

__all__ = [
    "MU",
    "BracketWord",
    "BracketBasis",
    "RankReport",
    "Verdict",
    "lie_bracket",
    "mu_bracket",
    "generate_basis",
    "numeric_rank",
    "hormander_verdict",
    "default_window",
    "MAX_DEPTH",
]

MU = "mu"
MAX_DEPTH = 12
MAX_VECTORS = 20000
PRUNE_TOL = 1e-10


@dataclass(frozen=True)
class BracketWord:
    """
    Construction record of a bracket vector.

    ``letters[0]`` is the index of the seeding volatility; each further
    letter is ``MU`` or a volatility index and names the field bracketed on
    from the left.
    """

    letters: tuple

    def __post_init__(self) -> None:
        if not self.letters or not isinstance(self.letters[0], int):
            raise ValueError("a bracket word starts with a volatility index")

    @property
    def depth(self) -> int:
        return len(self.letters) - 1

    def extend(self, letter) -> "BracketWord":
        return BracketWord(self.letters + (letter,))

    def label(self) -> str:
        s = f"s{self.letters[0]}"
        for a in self.letters[1:]:
            s = f"[{'mu' if a == MU else f's{a}'},{s}]"
        return s


def lie_bracket(v1: Field, v2: Field, r, method: str = "exact") -> np.ndarray:
    """[V1, V2](r) = DV1(r).V2(r) - DV2(r).V1(r)"""
    r = r.values if isinstance(r, Curve) else np.asarray(r, dtype=float)
    a = dir_derivative(v1, r, v2.value(r), method)
    b = dir_derivative(v2, r, v1.value(r), method)
    return a - b


def mu_bracket(model: FieldModel, v: Field, r, method: str = "exact") -> np.ndarray:
    r = r.values if isinstance(r, Curve) else np.asarray(r, dtype=float)
    g = model.grid
    vr = v.value(r)
    beta = nonlocal_drift_part(model, r)
    if method == "exact":
        dbeta_v = nonlocal_drift_deriv(model, r, vr)
    else:
        dbeta_v = _fd_columns(lambda x: nonlocal_drift_part(model, x), g, r, vr)
    dv = dir_derivative(v, r, g.derivative(r) + beta, method)
    return g.derivative(vr) + dbeta_v - dv


@dataclass(frozen=True, eq=False)
class BracketBasis:
    grid: Grid
    r0: np.ndarray = field(repr=False)
    words: tuple = ()
    vectors: np.ndarray = field(default=None, repr=False)
    max_depth: int = 0
    frozen_approx: bool = False

    @property
    def depths(self) -> np.ndarray:
        return np.array([w.depth for w in self.words], dtype=int)

    def depth_slices(self) -> list:
        d = self.depths
        return [np.nonzero(d == k)[0] for k in range(self.max_depth + 1)]

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["word", "depth"] + [repr(float(x)) for x in self.grid.x])
            for word, vec in zip(self.words, self.vectors):
                w.writerow([word.label(), word.depth] + [repr(float(v)) for v in vec])


def _residual(q: list, v: np.ndarray) -> np.ndarray:
    res = v
    if q:
        Q = np.array(q).T
        for _ in range(2):
            res = res - Q @ (Q.T @ res)
    return res


def generate_basis(
    model: FieldModel,
    r0,
    max_depth: int = 8,
    prune: bool = True,
    prune_tol: float = PRUNE_TOL,
) -> BracketBasis:
    """
    Bracket vectors at r0 up to ``max_depth``.

    Depth k+1 holds [mu, V] and [sigma_i, V] for every kept depth-k vector V.
    Exactly-zero vectors are always dropped; with ``prune`` a vector whose
    residual after projection onto the kept span is below ``prune_tol`` of its
    norm is dropped too.
    """
    if max_depth > MAX_DEPTH or max_depth < 0:
        raise ValueError(f"max_depth must be in [0, {MAX_DEPTH}]")
    g = model.grid
    r0 = r0.values if isinstance(r0, Curve) else np.asarray(r0, dtype=float)

    words, vecs, q = [], [], []

    def keep(word, vec) -> bool:
        nv = np.linalg.norm(vec)
        if nv == 0.0 or not np.isfinite(nv):
            return False
        if prune:
            res = _residual(q, vec)
            nr = np.linalg.norm(res)
            if nr < prune_tol * nv:
                return False
            q.append(res / nr)
        words.append(word)
        vecs.append(vec)
        if len(vecs) > MAX_VECTORS:
            raise ValueError("bracket basis exceeded the vector cap; enable pruning or lower max_depth")
        return True

    level = []
    for i, f in enumerate(model.sigmas):
        w = BracketWord((i,))
        v = f.value(r0)
        if keep(w, v):
            level.append((w, f))

    for _ in range(max_depth):
        nxt = []
        for w, f in level:
            v = mu_bracket(model, f, r0)
            if keep(w.extend(MU), v):
                nxt.append((w.extend(MU), frozen(g, v)))
            for j, s in enumerate(model.sigmas):
                v = lie_bracket(s, f, r0)
                if keep(w.extend(j), v):
                    nxt.append((w.extend(j), frozen(g, v)))
        level = nxt

    vectors = np.array(vecs) if vecs else np.zeros((0, g.n_points))
    approx = not model.state_independent and max_depth >= 2
    return BracketBasis(g, r0.copy(), tuple(words), vectors, max_depth, approx)


def default_window(grid: Grid) -> tuple:
    """Central 60% of the grid as a half-open index range."""
    lo = int(math.ceil(0.2 * grid.n_points))
    return (lo, grid.n_points - lo)


@dataclass(frozen=True, eq=False)
class RankReport:
    singular_values: np.ndarray
    rank_at_depth: np.ndarray
    count_at_depth: np.ndarray
    window: tuple
    tol_rel: float
    tol_used: float
    frozen_approx: bool

    @property
    def rank(self) -> int:
        return int(self.rank_at_depth[-1]) if len(self.rank_at_depth) else 0

    def to_dict(self) -> dict:
        return {
            "singular_values": self.singular_values.tolist(),
            "rank_at_depth": self.rank_at_depth.tolist(),
            "count_at_depth": self.count_at_depth.tolist(),
            "window": list(self.window),
            "tol_rel": self.tol_rel,
            "tol_used": self.tol_used,
            "frozen_approx": self.frozen_approx,
            "note": "rank on a finite window is a proxy for density of the bracket span",
        }


def numeric_rank(basis: BracketBasis, window: Optional[tuple] = None, tol_rel: Optional[float] = None) -> RankReport:
    """
    Cumulative numerical rank of the bracket vectors restricted to ``window``.

    Rows are scaled to unit norm before factorization.  A single threshold,
    ``tol_rel`` times the largest singular value of the full stack, is used
    for every depth, so the rank sequence is nondecreasing by interlacing.
    """
    if len(basis.words) == 0:
        raise ValueError("empty bracket basis")
    g = basis.grid
    lo, hi = window if window is not None else default_window(g)
    if not 0 <= lo < hi <= g.n_points:
        raise ValueError("empty or invalid window")
    if tol_rel is None:
        tol_rel = 1e-8 * g.n_points
    rows = basis.vectors[:, lo:hi]
    norms = np.linalg.norm(rows, axis=1)
    rows = np.where(norms[:, None] > 0, rows / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
    s = np.linalg.svd(rows, compute_uv=False)
    thresh = tol_rel * s[0] if s.size else 0.0
    depths = basis.depths
    ranks, counts = [], []
    for k in range(basis.max_depth + 1):
        sel = rows[depths <= k]
        counts.append(len(sel))
        if len(sel) == 0 or thresh == 0.0:
            ranks.append(0)
            continue
        sk = np.linalg.svd(sel, compute_uv=False)
        ranks.append(int(np.sum(sk > thresh)))
    return RankReport(
        s, np.array(ranks), np.array(counts), (lo, hi), float(tol_rel), float(thresh), basis.frozen_approx
    )


@dataclass(frozen=True)
class Verdict:
    kind: str  # "SaturatesH0" | "FiniteDimensional" | "Inconclusive"
    dim: Optional[int] = None
    target_dim: Optional[int] = None

    def to_dict(self) -> dict:
        return {"verdict": self.kind, "dim": self.dim, "target_dim": self.target_dim}

    def __str__(self) -> str:
        return f"{self.kind}({self.dim})" if self.kind == "FiniteDimensional" else self.kind


def hormander_verdict(report: RankReport, target_dim: Optional[int] = None) -> Verdict:
    """
    ``SaturatesH0`` when the rank grows with depth and reaches
    min(target_dim, vector count); ``FiniteDimensional(m)`` when it plateaus
    at m < target_dim over the last three depths; otherwise ``Inconclusive``.
    """
    if target_dim is None:
        target_dim = report.window[1] - report.window[0]
    ranks = report.rank_at_depth
    if len(ranks) >= 2 and ranks[-1] > ranks[0] and ranks[-1] >= min(target_dim, report.count_at_depth[-1]):
        return Verdict("SaturatesH0", int(ranks[-1]), target_dim)
    if len(ranks) >= 3 and ranks[-1] == ranks[-2] == ranks[-3] and ranks[-1] < target_dim:
        return Verdict("FiniteDimensional", int(ranks[-1]), target_dim)
    return Verdict("Inconclusive", None, target_dim)
