"""
Experiment configuration: one JSON document with the sections
``grid``, ``model``, ``sim``, ``functionals`` and ``experiment``.

Unknown keys are rejected.  Errors carry the dotted key path and, when the
source text is available, the line it sits on.
"""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .fields import AffineClamped, DriftMode, FieldModel, Logistic, additive, exp_decay, scalar_gate
from .grid import Grid, make_grid, parse_functional, parse_metric
from .sim import SimConfig

__all__ = ["ConfigError", "Shape", "Experiment", "load_config", "parse_config", "bundled_config", "BUNDLED"]

BUNDLED = ("additive_bump", "scalar_gate", "expdecay_vasicek", "hjm_generic")
_ALIASES = {"expdecay": "expdecay_vasicek"}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = "", line: Optional[int] = None):
        where = f" (line {line})" if line is not None else ""
        prefix = f"{key}: " if key else ""
        super().__init__(f"{prefix}{message}{where}")
        self.key = key
        self.line = line


# -- schema ---------------------------------------------------------------------

_DEFAULTS = {
    "grid": {"boundary": "flat"},
    "model": {"drift": "zero", "custom_drift": None, "x_cut": None, "taper_width": None, "r0": {"type": "constant", "value": 0.0}},
    "sim": {"dt": None, "scheme": "ito", "splitting": "lie", "metric": "l2"},
    "experiment": {
        "seed": 0,
        "paths": 100,
        "threads": 1,
        "max_depth": 8,
        "window": None,
        "tol_rel": None,
        "target_dim": None,
        "threshold_rel": 1e-8,
        "frob_tol": 0.05,
        "z_crit": 4.0,
        "n_se": 4.0,
        "probes": 8,
        "fd_eps": 1e-4,
        "flow_pairs": 10,
        "save_paths": 1,
        "negative_control": True,
        "bins": 40,
        "max_steps": 256,
    },
}
_REQUIRED = {
    "grid": ("x_min", "x_max", "n_points"),
    "model": ("fields",),
    "sim": ("t_end",),
    "experiment": (),
}
_SECTIONS = ("grid", "model", "sim", "functionals", "experiment")

_SHAPE_KEYS = {
    "gaussian": {"amplitude": 1.0, "center": 0.0, "width": 1.0},
    "exp": {"amplitude": 1.0, "rate": 1.0},
    "constant": {"value": 0.0},
    "nelson_siegel": {"beta0": 0.0, "beta1": 0.0, "beta2": 0.0, "tau": 1.0},
    "values": {"values": None},
}
_GATE_KEYS = {
    "logistic": ({"scale", "center", "amplitude"}, {"offset": 0.0}),
    "affine_clamped": ({"a", "b", "lo", "hi"}, {"sharpness": None}),
}
_FIELD_KEYS = {
    "additive": {"shape"},
    "exp_decay": {"c", "lam"},
    "scalar_gate": {"shape", "functional", "gate"},
}


@dataclass(frozen=True)
class Shape:
    """A curve profile given by a catalog formula or by explicit node values."""

    kind: str
    params: tuple

    def __call__(self, x):
        p = dict(self.params)
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            return p["amplitude"] * np.exp(-((x - p["center"]) ** 2) / (2 * p["width"] ** 2))
        if self.kind == "exp":
            return p["amplitude"] * np.exp(-p["rate"] * x)
        if self.kind == "constant":
            return np.full_like(x, p["value"])
        if self.kind == "nelson_siegel":
            u = x / p["tau"]
            e = np.exp(-u)
            return p["beta0"] + p["beta1"] * e + p["beta2"] * u * e
        raise TypeError("node-valued shapes are not callable")

    def on(self, grid: Grid):
        """Callable (keeps an analytic form) or an array of node values."""
        if self.kind == "values":
            v = np.asarray(dict(self.params)["values"], dtype=float)
            if v.shape != (grid.n_points,):
                raise ValueError(f"'values' shape needs {grid.n_points} entries, got {v.size}")
            return v
        return self


class _Locator:
    def __init__(self, text: Optional[str]):
        self.text = text

    def line(self, path: str) -> Optional[int]:
        if not self.text:
            return None
        pos = 0
        found = None
        for part in path.split("."):
            if part.isdigit():
                continue
            m = re.compile(r'"%s"\s*:' % re.escape(part)).search(self.text, pos)
            if m is None:
                break
            pos, found = m.start(), m.start()
        if found is None:
            return None
        return self.text.count("\n", 0, found) + 1


def _check_keys(obj, allowed, required, path: str, loc: _Locator) -> None:
    if not isinstance(obj, dict):
        raise ConfigError("expected an object", path, loc.line(path))
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r}", f"{path}.{k}" if path else k, loc.line(f"{path}.{k}"))
    for k in required:
        if k not in obj:
            raise ConfigError("missing required field", f"{path}.{k}" if path else k, loc.line(path))


def _num(v, path, loc, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"expected a finite number, got {v!r}", path, loc.line(path))
    if integer and int(v) != v:
        raise ConfigError(f"expected an integer, got {v!r}", path, loc.line(path))
    return int(v) if integer else float(v)


def _shape(spec, path, loc) -> Shape:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError("shape needs a 'type'", path, loc.line(path))
    kind = spec["type"]
    if kind not in _SHAPE_KEYS:
        raise ConfigError(f"unknown shape type {kind!r}", f"{path}.type", loc.line(f"{path}.type"))
    defaults = _SHAPE_KEYS[kind]
    _check_keys(spec, {"type", *defaults}, ("values",) if kind == "values" else (), path, loc)
    params = {}
    for k, d in defaults.items():
        v = spec.get(k, d)
        if kind == "values":
            if not isinstance(v, list):
                raise ConfigError("expected a list of numbers", f"{path}.{k}", loc.line(f"{path}.{k}"))
            params[k] = tuple(_num(a, f"{path}.{k}", loc) for a in v)
        else:
            params[k] = _num(v, f"{path}.{k}", loc)
    return Shape(kind, tuple(params.items()))


def _gate(spec, path, loc):
    if not isinstance(spec, dict) or spec.get("type") not in _GATE_KEYS:
        raise ConfigError("gate type must be 'logistic' or 'affine_clamped'", path, loc.line(path))
    req, opt = _GATE_KEYS[spec["type"]]
    _check_keys(spec, {"type", *req, *opt}, tuple(sorted(req)), path, loc)
    kw = {k: _num(spec[k], f"{path}.{k}", loc) for k in req}
    for k, d in opt.items():
        kw[k] = d if spec.get(k) is None else _num(spec[k], f"{path}.{k}", loc)
    try:
        return Logistic(**kw) if spec["type"] == "logistic" else AffineClamped(**kw)
    except ValueError as e:
        raise ConfigError(str(e), path, loc.line(path)) from None


def _functional(spec, path, loc):
    try:
        if not isinstance(spec, dict):
            raise ValueError("expected an object")
        _check_keys(spec, {"type", "tenor", "weights"}, ("type",), path, loc)
        return parse_functional(spec)
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad functional: {e}", path, loc.line(path)) from None


@dataclass(frozen=True, eq=False)
class Experiment:
    """A validated, resolved configuration."""

    resolved: dict
    grid: Grid
    model: FieldModel
    r0: np.ndarray
    sim: SimConfig
    functionals: tuple
    options: dict

    def with_overrides(self, **kw) -> "Experiment":
        kw = {k: v for k, v in kw.items() if v is not None}
        if not kw:
            return self
        res = copy.deepcopy(self.resolved)
        res["experiment"].update(kw)
        return parse_config(res)


def _fill(raw: dict, loc: _Locator) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object")
    _check_keys(raw, set(_SECTIONS), (), "", loc)
    for s in ("grid", "model", "sim"):
        if s not in raw:
            raise ConfigError("missing required section", s)
    res = {}
    for s in _SECTIONS:
        if s == "functionals":
            v = raw.get(s, [])
            if not isinstance(v, list):
                raise ConfigError("expected a list", s, loc.line(s))
            res[s] = copy.deepcopy(v)
            continue
        sec = raw.get(s, {})
        allowed = set(_REQUIRED[s]) | set(_DEFAULTS[s])
        _check_keys(sec, allowed, _REQUIRED[s], s, loc)
        merged = copy.deepcopy(_DEFAULTS[s])
        merged.update(copy.deepcopy(sec))
        res[s] = merged
    return res


def parse_config(raw: Union[dict, str], text: Optional[str] = None) -> Experiment:
    """Validate a config (dict or JSON text) and build the objects it describes."""
    if isinstance(raw, str):
        text = raw
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e.msg}", "", e.lineno) from None
    loc = _Locator(text)
    res = _fill(raw, loc)

    gs = res["grid"]
    try:
        grid = make_grid(
            _num(gs["x_min"], "grid.x_min", loc),
            _num(gs["x_max"], "grid.x_max", loc),
            _num(gs["n_points"], "grid.n_points", loc, integer=True),
            gs["boundary"],
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e), "grid", loc.line("grid")) from None

    ms = res["model"]
    if not isinstance(ms["fields"], list) or not ms["fields"]:
        raise ConfigError("expected a non-empty list", "model.fields", loc.line("model.fields"))
    fields = []
    for i, fs in enumerate(ms["fields"]):
        p = f"model.fields.{i}"
        kind = fs.get("kind") if isinstance(fs, dict) else None
        if kind not in _FIELD_KEYS:
            raise ConfigError(f"field kind must be one of {sorted(_FIELD_KEYS)}", p, loc.line(p))
        _check_keys(fs, {"kind", *_FIELD_KEYS[kind]}, tuple(sorted(_FIELD_KEYS[kind])), p, loc)
        try:
            if kind == "additive":
                fields.append(additive(grid, _shape(fs["shape"], f"{p}.shape", loc).on(grid)))
            elif kind == "exp_decay":
                fields.append(exp_decay(grid, _num(fs["c"], f"{p}.c", loc), _num(fs["lam"], f"{p}.lam", loc)))
            else:
                fields.append(
                    scalar_gate(
                        grid,
                        _shape(fs["shape"], f"{p}.shape", loc).on(grid),
                        _functional(fs["functional"], f"{p}.functional", loc),
                        _gate(fs["gate"], f"{p}.gate", loc),
                    )
                )
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e), p, loc.line(p)) from None

    try:
        mode = DriftMode(ms["drift"])
    except ValueError:
        raise ConfigError("drift must be 'zero', 'hjm' or 'custom'", "model.drift", loc.line("model.drift")) from None
    custom = None
    if ms["custom_drift"] is not None:
        if mode is not DriftMode.CUSTOM:
            raise ConfigError("only allowed with drift 'custom'", "model.custom_drift", loc.line("model.custom_drift"))
        sh = _shape(ms["custom_drift"], "model.custom_drift", loc).on(grid)
        custom = grid.sample(sh) if callable(sh) else sh
    x_cut = None if ms["x_cut"] is None else _num(ms["x_cut"], "model.x_cut", loc)
    width = None if ms["taper_width"] is None else _num(ms["taper_width"], "model.taper_width", loc)
    try:
        model = FieldModel(grid, fields, mode, custom, x_cut, width)
    except ValueError as e:
        raise ConfigError(str(e), "model", loc.line("model")) from None
    try:
        r0s = _shape(ms["r0"], "model.r0", loc).on(grid)
        r0 = grid.sample(r0s) if callable(r0s) else r0s
    except ValueError as e:
        raise ConfigError(str(e), "model.r0", loc.line("model.r0")) from None

    ss = res["sim"]
    try:
        sim = SimConfig(
            t_end=_num(ss["t_end"], "sim.t_end", loc),
            dt=None if ss["dt"] is None else _num(ss["dt"], "sim.dt", loc),
            scheme=ss["scheme"],
            splitting=ss["splitting"],
            metric=parse_metric(ss["metric"]),
        )
        sim.steps(grid)
    except ConfigError:
        raise
    except (ValueError, AttributeError) as e:
        raise ConfigError(str(e), "sim", loc.line("sim")) from None

    functionals = tuple(_functional(f, f"functionals.{i}", loc) for i, f in enumerate(res["functionals"]))
    for i, f in enumerate(functionals):
        try:
            f.row(grid)
        except ValueError as e:
            raise ConfigError(str(e), f"functionals.{i}", loc.line("functionals")) from None

    ex = res["experiment"]
    opts = {}
    for k, v in ex.items():
        p = f"experiment.{k}"
        if k in ("seed", "paths", "threads", "max_depth", "probes", "flow_pairs", "save_paths", "bins", "target_dim", "max_steps"):
            opts[k] = None if v is None else _num(v, p, loc, integer=True)
        elif k == "negative_control":
            if not isinstance(v, bool):
                raise ConfigError("expected true or false", p, loc.line(p))
            opts[k] = v
        elif k == "window":
            if v is not None and (not isinstance(v, list) or len(v) != 2):
                raise ConfigError("expected [lo, hi] node indices", p, loc.line(p))
            opts[k] = None if v is None else tuple(_num(a, p, loc, integer=True) for a in v)
        else:
            opts[k] = None if v is None else _num(v, p, loc)
    if opts["paths"] < 1 or opts["threads"] < 1:
        raise ConfigError("paths and threads must be positive", "experiment", loc.line("experiment"))
    return Experiment(res, grid, model, r0, sim, functionals, opts)


def load_config(path: Union[str, Path]) -> Experiment:
    text = Path(path).read_text()
    return parse_config(text)


def bundled_config(name: str) -> Path:
    """Path of a configuration shipped with the package."""
    stem = name[:-5] if name.endswith(".json") else name
    stem = _ALIASES.get(stem, stem)
    p = Path(__file__).parent / "configs" / f"{stem}.json"
    if not p.exists():
        raise FileNotFoundError(f"no bundled config {name!r}; available: {', '.join(BUNDLED)}")
    return p


def dumps(obj: Any) -> str:
    """Deterministic JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
