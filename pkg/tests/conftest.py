import numpy as np
import pytest

from hjm_hypo import (
    FieldModel,
    Logistic,
    Yield,
    additive,
    exp_decay,
    make_grid,
    scalar_gate,
)


def gaussian(x):
    return np.exp(-x**2 / 2)


@pytest.fixture
def flat_grid():
    return make_grid(-4.0, 16.0, 201, "flat")


@pytest.fixture
def periodic_grid():
    return make_grid(-4.0, 4.0, 128, "periodic")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def gate_model(grid, amp=0.05, scale=10.0):
    sg = scalar_gate(grid, lambda x: amp * gaussian(x), Yield(1.0), Logistic(scale, 0.03, 1.0, 0.5))
    return FieldModel(grid, [sg])


def bump_model(grid, drift="zero", amp=1.0):
    return FieldModel(grid, [additive(grid, lambda x: amp * gaussian(x))], drift_mode=drift)


def expdecay_model(grid, c=0.01, lam=0.5, drift="hjm"):
    return FieldModel(grid, [exp_decay(grid, c, lam)], drift_mode=drift)


def gate_r0(grid):
    return 0.03 + 0.01 * np.exp(-(grid.x**2) / 0.98)


_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion covered by the test")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    label = mark.args[0]
    table = item.config.stash[_CRITERIA]
    failed = rep.failed or (rep.when == "call" and not rep.passed)
    if rep.when == "call" or failed:
        prev = table.get(label, True)
        table[label] = prev and not failed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_CRITERIA, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(table, key=lambda s: (int(s.split()[0].rstrip("ab")), s)):
        terminalreporter.write_line(f"{'PASS' if table[label] else 'FAIL'}  {label}")
