import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hjm_hypo.cli import main, run
from hjm_hypo.config import BUNDLED, ConfigError, bundled_config, load_config, parse_config

MINIMAL = {
    "grid": {"x_min": -4.0, "x_max": 16.0, "n_points": 201},
    "model": {"fields": [{"kind": "exp_decay", "c": 0.01, "lam": 0.5}], "drift": "hjm"},
    "sim": {"t_end": 0.5},
    "functionals": [{"type": "yield", "tenor": 1.0}, {"type": "yield", "tenor": 5.0}],
}


def _write(tmp_path, obj, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=2) if not isinstance(obj, str) else obj)
    return p


def test_defaults_filled():
    exp = parse_config(MINIMAL)
    assert exp.options["seed"] == 0 and exp.options["paths"] == 100
    assert exp.resolved["sim"]["scheme"] == "ito"
    assert exp.sim.steps(exp.grid) == 5
    assert len(exp.functionals) == 2


@pytest.mark.parametrize("name", BUNDLED + ("expdecay",))
def test_bundled_configs_parse(name):
    exp = load_config(bundled_config(name))
    assert exp.grid.n_points > 0 and exp.model.d >= 1


def test_missing_section_named():
    bad = {k: v for k, v in MINIMAL.items() if k != "grid"}
    with pytest.raises(ConfigError) as e:
        parse_config(bad)
    assert "grid" in str(e.value)


def test_unknown_key_reports_line():
    text = json.dumps(MINIMAL, indent=2).replace('"t_end": 0.5', '"t_end": 0.5, "t_ned": 1.0')
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert "t_ned" in str(e.value) and e.value.line is not None
    assert text.splitlines()[e.value.line - 1].count("t_ned") == 1


@pytest.mark.parametrize(
    "patch",
    [
        {"grid": {"x_min": 1.0, "x_max": 16.0, "n_points": 201}},
        {"sim": {"t_end": 0.5, "scheme": "milstein"}},
        {"sim": {"t_end": 0.5, "dt": 0.05}},
        {"model": {"fields": [{"kind": "wiggle"}]}},
        {"functionals": [{"type": "yield", "tenor": 99.0}]},
        {"experiment": {"paths": 0}},
    ],
)
def test_invalid_values_rejected(patch):
    cfg = dict(MINIMAL)
    cfg.update(patch)
    with pytest.raises(ValueError):
        parse_config(cfg)


def test_malformed_json():
    with pytest.raises(ConfigError):
        parse_config('{"grid": ')


def test_overrides():
    exp = parse_config(MINIMAL).with_overrides(seed=5, paths=3, threads=None)
    assert exp.options["seed"] == 5 and exp.options["paths"] == 3


def test_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, MINIMAL)
    assert main(["hormander", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    bad = _write(tmp_path, {k: v for k, v in MINIMAL.items() if k != "grid"}, "bad.json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o2")]) == 1
    assert "grid" in capsys.readouterr().err
    assert main(["frobnicate", "--config", str(good), "--out", str(tmp_path / "o3")]) == 1
    assert main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o4")]) == 3
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["simulate", "--config", str(good), "--out", str(blocker / "sub")]) == 3
    assert main(["oracle", "--config", str(good), "--out", str(tmp_path / "o5")]) == 1


def test_numerical_failure_exit(tmp_path, monkeypatch):
    from hjm_hypo import cli, sim

    def boom(run):
        raise sim.SingularStepError(3, 1e20)

    monkeypatch.setitem(cli.COMMANDS, "simulate", boom)
    assert main(["simulate", "--config", str(_write(tmp_path, MINIMAL)), "--out", str(tmp_path / "o")]) == 2


def test_console_script(tmp_path):
    r = subprocess.run(
        [sys.executable, "-m", "hjm_hypo.cli", "hormander", "--config", "expdecay", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert r.returncode == 0 and "FiniteDimensional(1)" in r.stdout


def test_hormander_expdecay(tmp_path):
    body = run("hormander", "expdecay", tmp_path)
    assert body["verdict"] == "FiniteDimensional(1)"
    assert {"basis.csv", "rank_report.json", "summary.json", "meta.json"} <= set(os.listdir(tmp_path))


def test_hormander_generic(tmp_path):
    body = run("hormander", "hjm_generic", tmp_path)
    assert body["verdict"] == "SaturatesH0"
    assert body["rank_at_depth"] == sorted(body["rank_at_depth"])


def test_covariance_verdicts(tmp_path):
    assert run("covariance", "additive_bump", tmp_path / "a", paths=20)["verdict"]["verdict"] == "DensityPlausible"
    assert run("covariance", "expdecay", tmp_path / "b", paths=20)["verdict"]["verdict"] == "Degenerate"


def test_reports_self_describing(tmp_path):
    run("simulate", "scalar_gate", tmp_path, paths=10)
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert doc["tool"].startswith("hjm-hypo ") and doc["seed"] == 7
    assert len(doc["config_sha256"]) == 64 and "grid" in doc["config"]
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert "timestamp" in meta and meta["config"]["experiment"]["paths"] == 10
    assert (tmp_path / "paths" / "path_00000").is_dir()


def _tree(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name != "meta.json"}


@pytest.mark.parametrize("sub", ["simulate", "covariance", "flowcheck", "longrate"])
def test_determinism_across_threads(tmp_path, sub):
    trees = []
    for w in (1, 3):
        run(sub, "scalar_gate", tmp_path / f"t{w}", paths=12, threads=w)
        trees.append(_tree(tmp_path / f"t{w}"))
    assert trees[0] and trees[0] == trees[1]


def test_seed_changes_output(tmp_path):
    a = run("simulate", "scalar_gate", tmp_path / "a", paths=5, seed=1)
    b = run("simulate", "scalar_gate", tmp_path / "b", paths=5, seed=2)
    assert a["mean"] != b["mean"]


def test_flowcheck_passes(tmp_path):
    body = run("flowcheck", "scalar_gate", tmp_path, paths=2)
    assert body["fd_jacobian"]["passed"]
    doc = json.loads((tmp_path / "flowcheck.json").read_text())["result"]
    assert doc["pairing"]["passed"] and doc["flow_property"]["passed"]


def test_longrate_hjm(tmp_path):
    body = run("longrate", "hjm_generic", tmp_path, paths=4)
    assert body["max_deviation"] <= 1e-10
    assert body["negative_control"]["max_deviation"] > 1e-6
    assert body["conserved"]


def test_oracle_small(tmp_path):
    body = run("oracle", "additive_bump", tmp_path, paths=400)
    assert np.isfinite(body["comparison"]["rel_frobenius"])
    assert (tmp_path / "functional_hist.csv").exists()
