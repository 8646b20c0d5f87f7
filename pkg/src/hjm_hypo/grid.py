"""
Discretized forward-curve space.

A forward curve r(x) is sampled on a uniform grid in time-to-maturity x
(years).  The grid may extend to negative x so that the shift group
(T_t r)(x) = r(x + t) and its generator d/dx behave like operators on the
whole real line.  Two boundary treatments are supported:

* ``periodic``: x_max is identified with x_min, so the grid holds
  ``n_points`` distinct nodes x_min + i*dx with dx = (x_max - x_min)/n_points
  and shifts are exact index rotations (a group).
* ``flat``: nodes include both endpoints, dx = (x_max - x_min)/(n_points - 1),
  and values beyond either edge are held at the edge value (a semigroup whose
  shift matrix is not invertible).

Linear functionals (point evaluation, yield, long rate, explicit weights) are
materialized as coefficient rows so that composing them with linear maps is a
plain matrix product.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Union

import numpy as np

__all__ = [
    "Boundary",
    "Grid",
    "make_grid",
    "Curve",
    "L2Grid",
    "Hw",
    "Metric",
    "PointEval",
    "Yield",
    "LongRate",
    "Weights",
    "LinearFunctional",
    "shift",
    "apply_generator",
    "inner_product",
    "eval_functional",
    "functional_row",
    "parse_functional",
    "parse_metric",
]

_SHIFT_RTOL = 1e-9


class Boundary(str, enum.Enum):
    PERIODIC = "periodic"
    FLAT = "flat"


@dataclass(frozen=True)
class Grid:
    """
    Uniform grid in time-to-maturity.

    Parameters
    ----------
    x_min, x_max : float
        Grid bounds in years.  ``x_min`` may be negative.
    n_points : int
        Number of stored nodes (>= 2; flat grids need >= 3 for the
        second-order edge stencils of the generator).
    boundary : Boundary
        ``periodic`` or ``flat``.
    """

    x_min: float
    x_max: float
    n_points: int
    boundary: Boundary = Boundary.FLAT

    def __post_init__(self) -> None:
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max)):
            raise ValueError("grid bounds must be finite")
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValueError(f"n_points must be an integer >= 2, got {self.n_points}")
        object.__setattr__(self, "n_points", int(self.n_points))
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be < x_max")

    @property
    def periodic(self) -> bool:
        return self.boundary is Boundary.PERIODIC

    @property
    def dx(self) -> float:
        span = self.x_max - self.x_min
        if self.periodic:
            return span / self.n_points
        return span / (self.n_points - 1)

    @cached_property
    def x(self) -> np.ndarray:
        x = self.x_min + self.dx * np.arange(self.n_points)
        if not self.periodic:
            x[-1] = self.x_max
        x.flags.writeable = False
        return x

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_points)

    def sample(self, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return np.asarray(func(self.x), dtype=float) * np.ones(self.n_points)

    def index_of(self, x: float, tol: float = 1e-9) -> int:
        """Return the node index at ``x``; raise if ``x`` is not a node."""
        pos = (x - self.x_min) / self.dx
        i = int(round(pos))
        if abs(pos - i) > tol or not 0 <= i < self.n_points:
            raise ValueError(f"x={x} is not a grid node")
        return i

    # -- shift group / semigroup ------------------------------------------

    def steps_for(self, t: float) -> int:
        """Convert a shift time to a whole number of grid steps."""
        pos = t / self.dx
        m = int(round(pos))
        if abs(pos - m) > _SHIFT_RTOL * max(1.0, abs(pos)):
            raise ValueError(f"shift t={t} is not an integer multiple of dx={self.dx}")
        return m

    def _shift_index(self, m: int) -> np.ndarray:
        i = np.arange(self.n_points)
        if self.periodic:
            return (i + m) % self.n_points
        return np.clip(i + m, 0, self.n_points - 1)

    def shift_steps(self, values: np.ndarray, m: int) -> np.ndarray:
        """(T r)(x_i) = r(x_i + m*dx), along axis 0."""
        if m == 0:
            return np.array(values, dtype=float, copy=True)
        if self.periodic:
            return np.roll(values, -m, axis=0)
        return np.asarray(values)[self._shift_index(m)]

    def shift(self, values: np.ndarray, t: float) -> np.ndarray:
        return self.shift_steps(values, self.steps_for(t))

    def shift_transpose_steps(self, values: np.ndarray, m: int) -> np.ndarray:
        """Action of the transposed shift matrix (Euclidean adjoint)."""
        if self.periodic:
            return np.roll(values, m, axis=0)
        values = np.asarray(values, dtype=float)
        out = np.zeros_like(values)
        np.add.at(out, self._shift_index(m), values)
        return out

    def shift_matrix(self, m: int = 1) -> np.ndarray:
        s = np.zeros((self.n_points, self.n_points))
        s[np.arange(self.n_points), self._shift_index(m)] = 1.0
        return s

    # -- generator ----------------------------------------------------------

    def derivative(self, values: np.ndarray) -> np.ndarray:
        """Second-order finite-difference d/dx along axis 0."""
        r = np.asarray(values, dtype=float)
        h2 = 2.0 * self.dx
        if self.periodic:
            return (np.roll(r, -1, axis=0) - np.roll(r, 1, axis=0)) / h2
        out = np.empty_like(r)
        out[1:-1] = (r[2:] - r[:-2]) / h2
        if self.n_points >= 3:
            out[0] = (-3.0 * r[0] + 4.0 * r[1] - r[2]) / h2
            out[-1] = (3.0 * r[-1] - 4.0 * r[-2] + r[-3]) / h2
        else:
            out[0] = out[-1] = (r[1] - r[0]) / self.dx
        return out

    @cached_property
    def derivative_matrix(self) -> np.ndarray:
        d = self.derivative(np.eye(self.n_points))
        d.flags.writeable = False
        return d

    # -- quadrature ---------------------------------------------------------

    def _cells(self) -> tuple[np.ndarray, np.ndarray]:
        # cell j spans [left_j, left_j + dx] between node idx_j and idx_{j+1}
        n = self.n_points
        ncell = n if self.periodic else n - 1
        left = self.x_min + self.dx * np.arange(ncell)
        right_idx = (np.arange(ncell) + 1) % n
        return left, right_idx

    def integral_row(self, a: float, b: float) -> np.ndarray:
        """
        Weights w with ``w @ r`` equal to the integral over [a, b] of the
        piecewise-linear interpolant of r.  Signed: swapping a and b flips
        the sign.
        """
        if a > b:
            return -self.integral_row(b, a)
        self._check_inside(a)
        self._check_inside(b)
        w = np.zeros(self.n_points)
        if a == b:
            return w
        left, right_idx = self._cells()
        dx = self.dx
        tu = np.clip((a - left) / dx, 0.0, 1.0)
        tv = np.clip((b - left) / dx, 0.0, 1.0)
        active = tv > tu
        j = np.nonzero(active)[0]
        tu, tv = tu[active], tv[active]
        np.add.at(w, j, dx * ((tv - tv**2 / 2) - (tu - tu**2 / 2)))
        np.add.at(w, right_idx[j], dx * (tv**2 - tu**2) / 2)
        return w

    def point_row(self, x: float) -> np.ndarray:
        self._check_inside(x)
        w = np.zeros(self.n_points)
        pos = (x - self.x_min) / self.dx
        i = int(math.floor(pos + 1e-12))
        t = pos - i
        if abs(t) < 1e-12:
            w[i % self.n_points] = 1.0
            return w
        w[i % self.n_points] += 1.0 - t
        w[(i + 1) % self.n_points] += t
        return w

    def cumulative_integral(self, values: np.ndarray) -> np.ndarray:
        """Signed integral from 0 to x_i of the interpolant, along axis 0."""
        r = np.asarray(values, dtype=float)
        c = np.zeros_like(r)
        c[1:] = np.cumsum(0.5 * self.dx * (r[1:] + r[:-1]), axis=0)
        return c - np.tensordot(self._row_to_zero, r, axes=(0, 0))

    @cached_property
    def _row_to_zero(self) -> np.ndarray:
        if not self.x_min <= 0.0 <= self.x_max:
            raise ValueError("integrals from 0 need 0 inside the grid")
        return self.integral_row(self.x_min, 0.0)

    @cached_property
    def cumulative_matrix(self) -> np.ndarray:
        m = self.cumulative_integral(np.eye(self.n_points))
        m.flags.writeable = False
        return m

    def _check_inside(self, x: float) -> None:
        if not self.x_min - 1e-12 <= x <= self.x_max + 1e-12:
            raise ValueError(f"x={x} outside grid [{self.x_min}, {self.x_max}]")

    # -- metrics ------------------------------------------------------------

    def weight(self, beta: float) -> np.ndarray:
        return np.where(self.x >= 0.0, np.exp(beta * np.maximum(self.x, 0.0)), 1.0)

    def gram(self, metric: "Metric") -> np.ndarray:
        """Gram matrix M with <a, b> = a @ M @ b."""
        if isinstance(metric, L2Grid):
            return self.dx * np.eye(self.n_points)
        d = self.derivative_matrix
        e0 = self.point_row(0.0)
        return d.T @ (self.weight(metric.beta)[:, None] * d) * self.dx + np.outer(e0, e0)

    def inner(self, a: np.ndarray, b: np.ndarray, metric: "Metric" = None) -> float:
        metric = metric or L2Grid()
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape[0] != self.n_points or b.shape[0] != self.n_points:
            raise ValueError("vector length does not match grid")
        if isinstance(metric, L2Grid):
            return float(np.dot(a, b) * self.dx)
        da, db = self.derivative(a), self.derivative(b)
        e0 = self.point_row(0.0)
        w = self.weight(metric.beta)
        return float(np.sum(da * db * w) * self.dx + (e0 @ a) * (e0 @ b))

    def norm(self, a: np.ndarray, metric: "Metric" = None) -> float:
        return math.sqrt(max(self.inner(a, a, metric), 0.0))

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "x_max": self.x_max,
            "n_points": self.n_points,
            "boundary": self.boundary.value,
        }


def make_grid(
    x_min: float, x_max: float, n_points: int, boundary: Union[Boundary, str] = Boundary.FLAT
) -> Grid:
    return Grid(float(x_min), float(x_max), n_points, Boundary(boundary))


# -- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class L2Grid:
    name = "l2"


@dataclass(frozen=True)
class Hw:
    """Weighted Sobolev-type metric: int h'(x)^2 w(x) dx + h(0)^2."""

    beta: float = 0.1
    name = "hw"


Metric = Union[L2Grid, Hw]


def parse_metric(spec) -> Metric:
    if spec is None:
        return L2Grid()
    if isinstance(spec, (L2Grid, Hw)):
        return spec
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind", "l2").lower()
    if kind in ("l2", "l2grid"):
        return L2Grid()
    if kind == "hw":
        return Hw(float(spec.get("beta", 0.1)))
    raise ValueError(f"unknown metric {kind!r}")


# -- curves -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Curve:
    """Forward curve sampled on a grid.  Immutable."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n_points,):
            raise ValueError(f"expected {self.grid.n_points} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("curve values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "Curve":
        return cls(grid, np.full(grid.n_points, float(c)))

    @classmethod
    def from_function(cls, grid: Grid, func: Callable[[np.ndarray], np.ndarray]) -> "Curve":
        return cls(grid, grid.sample(func))

    def _check(self, other: "Curve") -> None:
        if not isinstance(other, Curve):
            raise TypeError("curve arithmetic needs another Curve")
        if other.grid != self.grid:
            raise ValueError("curves live on different grids")

    def __add__(self, other: "Curve") -> "Curve":
        self._check(other)
        return Curve(self.grid, self.values + other.values)

    def __sub__(self, other: "Curve") -> "Curve":
        self._check(other)
        return Curve(self.grid, self.values - other.values)

    def __mul__(self, c: float) -> "Curve":
        return Curve(self.grid, float(c) * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "Curve":
        return Curve(self.grid, -self.values)

    def shift(self, t: float) -> "Curve":
        return Curve(self.grid, self.grid.shift(self.values, t))

    def derivative(self) -> "Curve":
        return Curve(self.grid, self.grid.derivative(self.values))

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "value"])
            for x, v in zip(self.grid.x, self.values):
                w.writerow([repr(float(x)), repr(float(v))])

    @classmethod
    def from_csv(cls, path: Union[str, Path], grid: Grid) -> "Curve":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        xs = np.array([float(r[0]) for r in rows])
        if xs.shape != grid.x.shape or not np.allclose(xs, grid.x, atol=1e-9):
            raise ValueError("CSV abscissae do not match the grid")
        return cls(grid, np.array([float(r[1]) for r in rows]))

    def tolist(self) -> list:
        return self.values.tolist()


# -- linear functionals --------------------------------------------------------


def _tenor_check(grid: Grid, x: float) -> None:
    if not 0.0 <= x <= grid.x_max + 1e-12:
        raise ValueError(f"tenor {x} outside [0, {grid.x_max}]")


@dataclass(frozen=True)
class PointEval:
    """r -> r(x), linear interpolation between nodes."""

    x: float

    def row(self, grid: Grid) -> np.ndarray:
        _tenor_check(grid, self.x)
        return grid.point_row(self.x)

    def label(self) -> str:
        return f"point({self.x:g})"


@dataclass(frozen=True)
class Yield:
    """r -> (1/x) int_0^x r(y) dy; x = 0 gives the short rate r(0)."""

    x: float

    def row(self, grid: Grid) -> np.ndarray:
        _tenor_check(grid, self.x)
        if self.x == 0.0:
            return grid.point_row(0.0)
        return grid.integral_row(0.0, self.x) / self.x

    def label(self) -> str:
        return f"yield({self.x:g})"


@dataclass(frozen=True)
class LongRate:
    """Value at the last grid node, the finite-grid stand-in for r(infinity)."""

    def row(self, grid: Grid) -> np.ndarray:
        w = np.zeros(grid.n_points)
        w[-1] = 1.0
        return w

    def label(self) -> str:
        return "long_rate"


@dataclass(frozen=True)
class Weights:
    coeffs: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    def row(self, grid: Grid) -> np.ndarray:
        if len(self.coeffs) != grid.n_points:
            raise ValueError("weights length does not match grid")
        return np.array(self.coeffs)

    def label(self) -> str:
        return "weights"


LinearFunctional = Union[PointEval, Yield, LongRate, Weights]


def parse_functional(spec) -> LinearFunctional:
    if isinstance(spec, (PointEval, Yield, LongRate, Weights)):
        return spec
    kind = spec["type"]
    if kind == "point":
        return PointEval(float(spec["tenor"]))
    if kind == "yield":
        return Yield(float(spec["tenor"]))
    if kind == "long_rate":
        return LongRate()
    if kind == "weights":
        return Weights(spec["weights"])
    raise ValueError(f"unknown functional type {kind!r}")


# -- operations on Curve objects -------------------------------------------------


def shift(curve: Curve, t: float) -> Curve:
    return curve.shift(t)


def apply_generator(curve: Curve) -> Curve:
    return curve.derivative()


def inner_product(a: Curve, b: Curve, metric: Metric = None) -> float:
    a._check(b)
    return a.grid.inner(a.values, b.values, metric)


def functional_row(f: LinearFunctional, grid: Grid) -> np.ndarray:
    return f.row(grid)


def eval_functional(f: LinearFunctional, r: Curve) -> float:
    if isinstance(f, LongRate):
        return float(r.values[-1])
    return float(f.row(r.grid) @ r.values)
