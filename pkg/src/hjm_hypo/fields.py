"""
Volatility and drift vector fields on the curve grid.

All fields are sampled on a fixed :class:`~hjm_hypo.grid.Grid` and act on
plain value arrays.  Derivative actions accept a single direction of shape
``(n,)`` or a block of directions stacked as columns, shape ``(n, m)``, so that
dense Jacobians are one call away.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .grid import Curve, Grid, LinearFunctional

__all__ = [
    "AffineClamped",
    "Logistic",
    "Field",
    "AdditiveField",
    "ScalarGateField",
    "TranslatedField",
    "additive",
    "exp_decay",
    "scalar_gate",
    "frozen",
    "DriftMode",
    "FieldModel",
    "smooth_taper",
    "sigma",
    "s_map",
    "hjm_drift",
    "drift",
    "drift_deriv",
    "dir_derivative",
    "stratonovich_drift",
    "nonlocal_drift_part",
    "nonlocal_drift_deriv",
    "fd_step",
]


def _values(r) -> np.ndarray:
    return r.values if isinstance(r, Curve) else np.asarray(r, dtype=float)


def _outer(profile: np.ndarray, coef) -> np.ndarray:
    # profile (n,), coef scalar or (m,) -> (n,) or (n, m)
    return np.multiply.outer(profile, coef)


def _as_cols(a: np.ndarray, ndim: int) -> np.ndarray:
    return a[:, None] if (a.ndim == 1 and ndim == 2) else a


def fd_step(grid: Grid, r: np.ndarray) -> float:
    """Central-difference step used for directional derivatives."""
    return 1e-5 * max(1.0, grid.norm(r))


# -- gates ---------------------------------------------------------------------


@dataclass(frozen=True)
class AffineClamped:
    """
    ``a + b*s`` softly clamped to ``[lo, hi]``.

    The clamp is a difference of two softplus ramps with rate ``sharpness``
    (default ``20 / (hi - lo)``), so every derivative is bounded.
    """

    a: float
    b: float
    lo: float
    hi: float
    sharpness: Optional[float] = None

    def __post_init__(self) -> None:
        vals = (self.a, self.b, self.lo, self.hi)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("affine gate needs finite a, b and clamp bounds")
        if not self.lo < self.hi:
            raise ValueError("affine gate needs lo < hi")
        if self.sharpness is None:
            object.__setattr__(self, "sharpness", 20.0 / (self.hi - self.lo))
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")

    def _softplus(self, z):
        k = self.sharpness
        return np.logaddexp(0.0, k * z) / k

    def __call__(self, s):
        y = self.a + self.b * s
        return self.lo + self._softplus(y - self.lo) - self._softplus(y - self.hi)

    def deriv(self, s):
        y = self.a + self.b * s
        k = self.sharpness
        return self.b * (expit(k * (y - self.lo)) - expit(k * (y - self.hi)))

    def deriv2(self, s):
        y = self.a + self.b * s
        k = self.sharpness
        p, q = expit(k * (y - self.lo)), expit(k * (y - self.hi))
        return self.b**2 * k * (p * (1 - p) - q * (1 - q))


@dataclass(frozen=True)
class Logistic:
    """``offset + amplitude / (1 + exp(-scale*(s - center)))``."""

    scale: float
    center: float
    amplitude: float
    offset: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.scale, self.center, self.amplitude, self.offset)):
            raise ValueError("logistic gate parameters must be finite")

    def __call__(self, s):
        return self.offset + self.amplitude * expit(self.scale * (s - self.center))

    def deriv(self, s):
        p = expit(self.scale * (s - self.center))
        return self.amplitude * self.scale * p * (1 - p)

    def deriv2(self, s):
        p = expit(self.scale * (s - self.center))
        return self.amplitude * self.scale**2 * p * (1 - p) * (1 - 2 * p)


# -- fields ----------------------------------------------------------------------


class Field:
    """A smooth vector field r -> V(r) on a grid."""

    kind = "field"
    state_independent = False
    grid: Grid

    def value(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def deriv(self, r: np.ndarray, v: np.ndarray) -> np.ndarray:
        """DV(r) . v"""
        raise NotImplementedError

    def second(self, r: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """D^2 V(r)[u, v]"""
        raise NotImplementedError

    def tapered(self, profile: np.ndarray) -> "Field":
        raise NotImplementedError

    def jacobian(self, r: np.ndarray) -> np.ndarray:
        return self.deriv(r, np.eye(self.grid.n_points))


@dataclass(frozen=True, eq=False)
class AdditiveField(Field):
    """State-independent field V(r) = profile."""

    grid: Grid
    profile: np.ndarray = field(repr=False)
    kind: str = "additive"
    func: Optional[Callable] = field(default=None, repr=False)

    state_independent = True

    def __post_init__(self) -> None:
        p = np.array(self.profile, dtype=float)
        if p.shape != (self.grid.n_points,) or not np.all(np.isfinite(p)):
            raise ValueError("field profile must be finite and match the grid")
        p.flags.writeable = False
        object.__setattr__(self, "profile", p)

    def value(self, r):
        return self.profile

    def deriv(self, r, v):
        return np.zeros_like(np.asarray(v, dtype=float))

    def second(self, r, u, v):
        return np.zeros_like(np.asarray(v, dtype=float))

    def tapered(self, profile):
        return AdditiveField(self.grid, self.profile * profile, self.kind)


@dataclass(frozen=True, eq=False)
class ScalarGateField(Field):
    """V(r) = g(l(r)) * profile for a linear functional l and a bounded gate g."""

    grid: Grid
    profile: np.ndarray = field(repr=False)
    row: np.ndarray = field(repr=False)
    gate: object = None
    kind: str = "scalar_gate"

    def __post_init__(self) -> None:
        if not isinstance(self.gate, (AffineClamped, Logistic)):
            raise TypeError("gate must be AffineClamped or Logistic")
        for name in ("profile", "row"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape != (self.grid.n_points,):
                raise ValueError(f"{name} does not match the grid")
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    def phi(self, r) -> float:
        return float(self.gate(self.row @ _values(r)))

    def value(self, r):
        return self.gate(self.row @ r) * self.profile

    def deriv(self, r, v):
        return self.gate.deriv(self.row @ r) * _outer(self.profile, self.row @ v)

    def second(self, r, u, v):
        return self.gate.deriv2(self.row @ r) * (self.row @ u) * _outer(self.profile, self.row @ v)

    def tapered(self, profile):
        return ScalarGateField(self.grid, self.profile * profile, self.row, self.gate, self.kind)


@dataclass(frozen=True, eq=False)
class TranslatedField(Field):
    """V'(r) = V(r + c) for a constant level c."""

    base: Field
    level: float

    @property
    def grid(self):
        return self.base.grid

    @property
    def kind(self):
        return self.base.kind

    @property
    def state_independent(self):
        return self.base.state_independent

    def value(self, r):
        return self.base.value(r + self.level)

    def deriv(self, r, v):
        return self.base.deriv(r + self.level, v)

    def second(self, r, u, v):
        return self.base.second(r + self.level, u, v)

    def tapered(self, profile):
        return TranslatedField(self.base.tapered(profile), self.level)


def additive(grid: Grid, h) -> AdditiveField:
    """Additive field from a curve, an array, or a function of x."""
    if callable(h):
        return AdditiveField(grid, grid.sample(h), func=h)
    return AdditiveField(grid, _values(h))


def exp_decay(grid: Grid, c: float, lam: float) -> AdditiveField:
    def func(x):
        return c * np.exp(-lam * x)

    return AdditiveField(grid, grid.sample(func), kind="exp_decay", func=func)


def scalar_gate(grid: Grid, h, functional: LinearFunctional, gate) -> ScalarGateField:
    profile = grid.sample(h) if callable(h) else _values(h)
    return ScalarGateField(grid, profile, functional.row(grid), gate)


def frozen(grid: Grid, v) -> AdditiveField:
    """Wrap a fixed vector as a state-independent field."""
    return AdditiveField(grid, _values(v), kind="frozen")


# -- model -----------------------------------------------------------------------


class DriftMode(str, enum.Enum):
    ZERO = "zero"
    HJM = "hjm"
    CUSTOM = "custom"


def smooth_taper(x: np.ndarray, x_cut: float, width: float) -> np.ndarray:
    """C-infinity step: 1 for x <= x_cut, 0 for x >= x_cut + width."""
    s = (np.asarray(x, dtype=float) - x_cut) / width
    out = np.where(s <= 0, 1.0, 0.0)
    mid = (s > 0) & (s < 1)
    sm = s[mid]
    a = np.exp(-1.0 / (1.0 - sm))
    b = np.exp(-1.0 / sm)
    out[mid] = a / (a + b)
    return out


@dataclass(frozen=True, eq=False)
class FieldModel:
    """
    Volatility fields sigma_1..sigma_d plus a drift specification.

    In ``hjm`` drift mode every volatility is multiplied by a smooth taper
    that equals 1 up to ``x_cut`` and vanishes from ``x_cut + taper_width``
    on; the drift is then the no-arbitrage sum of S(sigma_i), and both vanish
    on the tail so the last node (the long rate) is never moved.

    ``custom_drift`` is a map from a value array to a value array (or a fixed
    array for a state-independent drift) and is used with ``drift_mode=custom``.
    """

    grid: Grid
    fields: tuple
    drift_mode: DriftMode = DriftMode.ZERO
    custom_drift: Optional[object] = field(default=None, repr=False)
    x_cut: Optional[float] = None
    taper_width: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "drift_mode", DriftMode(self.drift_mode))
        for f in self.fields:
            if f.grid != self.grid:
                raise ValueError("all fields must live on the model grid")
        if self.drift_mode is DriftMode.CUSTOM and self.custom_drift is None:
            raise ValueError("custom drift mode needs custom_drift")
        if self.drift_mode is DriftMode.HJM:
            g = self.grid
            if self.x_cut is None:
                object.__setattr__(self, "x_cut", 0.8 * g.x_max)
            if self.taper_width is None:
                object.__setattr__(self, "taper_width", 0.5 * (g.x_max - self.x_cut))
            if not (self.taper_width > 0 and self.x_cut + self.taper_width < g.x_max):
                raise ValueError("taper must end strictly inside the grid")

    @property
    def d(self) -> int:
        return len(self.fields)

    @cached_property
    def taper(self) -> np.ndarray:
        if self.drift_mode is not DriftMode.HJM:
            return np.ones(self.grid.n_points)
        return smooth_taper(self.grid.x, self.x_cut, self.taper_width)

    @cached_property
    def sigmas(self) -> tuple:
        """The volatility fields actually used (tapered in hjm mode)."""
        if self.drift_mode is not DriftMode.HJM:
            return self.fields
        return tuple(f.tapered(self.taper) for f in self.fields)

    @property
    def state_independent(self) -> bool:
        fields_ok = all(f.state_independent for f in self.sigmas)
        if self.drift_mode is DriftMode.CUSTOM:
            return fields_ok and not callable(self.custom_drift)
        return fields_ok

    def describe(self) -> dict:
        return {
            "d": self.d,
            "fields": [f.kind for f in self.fields],
            "drift_mode": self.drift_mode.value,
            "x_cut": self.x_cut,
            "taper_width": self.taper_width,
        }


def sigma(model: FieldModel, i: int, r) -> np.ndarray:
    """Volatility field ``i`` (0-based) at state r."""
    if not 0 <= i < model.d:
        raise IndexError(f"field index {i} out of range for d={model.d}")
    return model.sigmas[i].value(_values(r))


def _bilinear(grid: Grid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # B(a, b)(x) = a(x) * int_0^x b
    cb = grid.cumulative_integral(b)
    ndim = max(a.ndim, cb.ndim)
    return _as_cols(a, ndim) * _as_cols(cb, ndim)


def s_map(h, grid: Optional[Grid] = None):
    """
    S(h)(x) = h(x) * int_0^x h(y) dy, with the signed integral for x < 0.

    Accepts a :class:`Curve` (returns a Curve) or an array plus ``grid``.
    """
    if isinstance(h, Curve):
        return Curve(h.grid, _bilinear(h.grid, h.values, h.values))
    return _bilinear(grid, np.asarray(h, dtype=float), np.asarray(h, dtype=float))


def hjm_drift(model: FieldModel, r) -> np.ndarray:
    r = _values(r)
    out = model.grid.zeros()
    for f in model.sigmas:
        out = out + s_map(f.value(r), model.grid)
    return out


def drift(model: FieldModel, r) -> np.ndarray:
    """The Ito drift alpha(r) (without the generator term)."""
    r = _values(r)
    mode = model.drift_mode
    if mode is DriftMode.ZERO:
        return model.grid.zeros()
    if mode is DriftMode.HJM:
        return hjm_drift(model, r)
    cd = model.custom_drift
    return np.asarray(cd(r) if callable(cd) else cd, dtype=float) * np.ones(model.grid.n_points)


def _fd_columns(func: Callable, grid: Grid, r: np.ndarray, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 2:
        return np.column_stack([_fd_columns(func, grid, r, v[:, j]) for j in range(v.shape[1])])
    nv = grid.norm(v)
    if nv == 0.0:
        return np.zeros_like(v)
    eps = fd_step(grid, r)
    u = v / nv
    return (func(r + eps * u) - func(r - eps * u)) / (2 * eps) * nv


def drift_deriv(model: FieldModel, r, v) -> np.ndarray:
    """D alpha(r) . v"""
    r = _values(r)
    v = np.asarray(v, dtype=float)
    mode = model.drift_mode
    if mode is DriftMode.ZERO:
        return np.zeros_like(v)
    if mode is DriftMode.HJM:
        g = model.grid
        out = np.zeros_like(v)
        for f in model.sigmas:
            if f.state_independent:
                continue
            s, ds = f.value(r), f.deriv(r, v)
            out = out + _bilinear(g, ds, s) + _bilinear(g, s, ds)
        return out
    if not callable(model.custom_drift):
        return np.zeros_like(v)
    return _fd_columns(model.custom_drift, model.grid, r, v)


def dir_derivative(f: Field, r, v, method: str = "exact") -> np.ndarray:
    """
    Directional derivative DV(r) . v.

    ``method="fd"`` uses a central difference along v/|v| with step
    ``1e-5 * max(1, |r|)``, rescaled by |v|.
    """
    r = _values(r)
    v = _values(v)
    if method == "exact":
        return f.deriv(r, v)
    if method == "fd":
        return _fd_columns(f.value, f.grid, r, v)
    raise ValueError(f"unknown method {method!r}")


def _ito_correction(model: FieldModel, r: np.ndarray) -> np.ndarray:
    out = model.grid.zeros()
    for f in model.sigmas:
        if not f.state_independent:
            out = out + f.deriv(r, f.value(r))
    return out


def nonlocal_drift_part(model: FieldModel, r) -> np.ndarray:
    """beta(r) = alpha(r) - 1/2 sum_i D sigma_i(r) . sigma_i(r)."""
    r = _values(r)
    return drift(model, r) - 0.5 * _ito_correction(model, r)


def stratonovich_drift(model: FieldModel, r) -> np.ndarray:
    r = _values(r)
    return model.grid.derivative(r) + nonlocal_drift_part(model, r)


def nonlocal_drift_deriv(model: FieldModel, r, v) -> np.ndarray:
    """D beta(r) . v, using exact second derivatives of the catalog fields."""
    r = _values(r)
    v = np.asarray(v, dtype=float)
    out = drift_deriv(model, r, v)
    for f in model.sigmas:
        if f.state_independent:
            continue
        s = f.value(r)
        out = out - 0.5 * (f.second(r, s, v) + f.deriv(r, f.deriv(r, v)))
    return out

