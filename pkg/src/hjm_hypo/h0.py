"""
Long-rate conservation and translation of a model into the subspace of
curves with zero long rate.

On the grid the long rate is the last-node value and the zero-long-rate
subspace is the set of curves vanishing there.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Union

import numpy as np

from .fields import DriftMode, FieldModel, TranslatedField, s_map
from .grid import Curve, LongRate
from .sim import PathBundle

__all__ = [
    "long_rate_series",
    "long_rate_deviation",
    "write_long_rate_csv",
    "translate_to_h0",
    "restore_level",
    "untapered_control",
]


def long_rate_series(bundle: PathBundle) -> np.ndarray:
    """Long rate of every recorded state."""
    return bundle.states @ LongRate().row(bundle.grid)


def long_rate_deviation(bundle: PathBundle) -> float:
    """max_k |l(r_k) - l(r_0)|"""
    s = long_rate_series(bundle)
    return float(np.max(np.abs(s - s[0])))


def write_long_rate_csv(bundle: PathBundle, path: Union[str, Path]) -> None:
    s = long_rate_series(bundle)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "long_rate"])
        for t, v in zip(bundle.times, s):
            w.writerow([repr(float(t)), repr(float(v))])


class _TranslatedDrift:
    def __init__(self, func, level: float):
        self.func = func
        self.level = level

    def __call__(self, r):
        return self.func(r + self.level)


def translate_to_h0(model: FieldModel, r0):
    """
    Move the problem to zero long rate.

    With c the long rate of r0, returns ``(model', r0 - c)`` where every
    state-dependent field (and a state-dependent custom drift) is evaluated
    at r + c.  Paths of the translated problem plus c are paths of the
    original one.  State-independent fields are kept as they are.

    Returns
    -------
    model_h0 : FieldModel
    r_star : Curve or ndarray
        Same type as ``r0``.
    level : float
        The constant c.
    """
    g = model.grid
    vals = r0.values if isinstance(r0, Curve) else np.asarray(r0, dtype=float)
    c = float(LongRate().row(g) @ vals)
    if c == 0.0:
        return model, r0, 0.0
    fields = tuple(f if f.state_independent else TranslatedField(f, c) for f in model.fields)
    cd = model.custom_drift
    if callable(cd):
        cd = _TranslatedDrift(cd, c)
    model_h0 = FieldModel(g, fields, model.drift_mode, cd, model.x_cut, model.taper_width)
    r_star = vals - c
    if isinstance(r0, Curve):
        r_star = Curve(g, r_star)
    return model_h0, r_star, c


def restore_level(states, level: float) -> np.ndarray:
    """Add the constant back to translated states."""
    return np.asarray(states, dtype=float) + level


class _RawHjmDrift:
    def __init__(self, grid, fields):
        self.grid = grid
        self.fields = fields

    def __call__(self, r):
        out = self.grid.zeros()
        for f in self.fields:
            out = out + s_map(f.value(r), self.grid)
        return out


def untapered_control(model: FieldModel) -> FieldModel:
    """
    The same volatilities without the tail taper, with the no-arbitrage drift
    built from them.  Used as a negative control for long-rate conservation.
    """
    if model.drift_mode is not DriftMode.HJM:
        return FieldModel(model.grid, model.fields, model.drift_mode, model.custom_drift)
    return FieldModel(model.grid, model.fields, DriftMode.CUSTOM, _RawHjmDrift(model.grid, model.fields))
