import numpy as np
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hjm_hypo import (
    FieldModel,
    Logistic,
    PointEval,
    SimConfig,
    Yield,
    additive,
    compare_cov,
    gaussianity_check,
    lie_bracket,
    make_grid,
    malliavin_matrix,
    mc_moments,
    pairing_residual,
    s_map,
    scalar_gate,
    simulate_path,
    translate_to_h0,
    restore_level,
)
from hjm_hypo.config import dumps, parse_config

PG = make_grid(-4, 4, 64, "periodic")
FG = make_grid(-4, 16, 101, "flat")
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
curves = arrays(np.float64, 64, elements=finite)
SETTINGS = settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@SETTINGS
@given(curves, st.integers(-70, 70), st.integers(-70, 70))
def test_periodic_shift_composes(r, a, b):
    np.testing.assert_array_equal(PG.shift_steps(PG.shift_steps(r, a), b), PG.shift_steps(r, a + b))


@SETTINGS
@given(arrays(np.float64, 101, elements=finite), st.integers(0, 30), st.integers(0, 30))
def test_flat_shift_semigroup(r, a, b):
    np.testing.assert_array_equal(FG.shift_steps(FG.shift_steps(r, a), b), FG.shift_steps(r, a + b))


@SETTINGS
@given(curves, curves, curves, finite)
def test_inner_bilinear_symmetric(a, b, c, s):
    assert PG.inner(a, b) == PG.inner(b, a)
    lhs = PG.inner(a + s * b, c)
    rhs = PG.inner(a, c) + s * PG.inner(b, c)
    assert abs(lhs - rhs) <= 1e-9 * (1 + abs(lhs) + abs(s) * abs(PG.inner(b, c)) + abs(PG.inner(a, c)))


@SETTINGS
@given(arrays(np.float64, 101, elements=st.floats(-1, 1)), st.floats(-3, 3))
def test_s_map_quadratic(h, c):
    np.testing.assert_allclose(s_map(c * h, FG), c * c * s_map(h, FG), rtol=1e-12, atol=1e-14)


def _gate(amp, center):
    return scalar_gate(PG, lambda x: amp * np.exp(-((x - center) ** 2)), Yield(1.0), Logistic(5.0, 0.0, 1.0, 0.5))


@SETTINGS
@given(st.floats(0.01, 1.0), st.floats(-2, 2), st.floats(0.01, 1.0), st.floats(-2, 2), arrays(np.float64, 64, elements=st.floats(-0.1, 0.1)))
def test_bracket_antisymmetric(a1, c1, a2, c2, r):
    f, g = _gate(a1, c1), _gate(a2, c2)
    np.testing.assert_allclose(lie_bracket(f, g, r), -lie_bracket(g, f, r), atol=1e-15)
    np.testing.assert_array_equal(lie_bracket(f, f, r), np.zeros(64))


@SETTINGS
@given(st.integers(0, 2**31), st.floats(0.05, 1.0), curves, curves)
def test_pairing_invariant(seed, amp, h, y):
    m = FieldModel(PG, [_gate(amp, 0.0)])
    assume(np.linalg.norm(h) > 0 and np.linalg.norm(y) > 0)
    # the pairing is bilinear, so unit directions cover every scale
    h, y = h / np.linalg.norm(h), y / np.linalg.norm(y)
    b = simulate_path(m, PG.zeros(), SimConfig(0.5, record_jacobian=True, jacobian_mode="full"), seed)
    assert pairing_residual(b, h, y).max() <= 1e-11 * PG.norm(h) * PG.norm(y)


@SETTINGS
@given(st.integers(0, 2**31), st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0, 2.0, 3.0]), min_size=1, max_size=4, unique=True))
def test_gamma_psd(seed, tenors):
    m = FieldModel(PG, [_gate(0.5, 0.0), additive(PG, lambda x: 0.1 * np.cos(x))])
    b = simulate_path(m, PG.zeros(), SimConfig(0.5), seed)
    gam = malliavin_matrix(m, b, [PointEval(t) for t in tenors]).gamma
    np.testing.assert_array_equal(gam, gam.T)
    assert np.linalg.eigvalsh(gam).min() >= -1e-14 * np.trace(gam)


@SETTINGS
@given(st.integers(0, 2**31), st.floats(-0.2, 0.2))
def test_translation_round_trip(seed, level):
    m = FieldModel(PG, [_gate(0.5, 0.0)])
    r0 = 0.02 * np.exp(-(PG.x**2)) + level
    m2, r2, c = translate_to_h0(m, r0)
    a = simulate_path(m, r0, SimConfig(0.5), seed)
    b = simulate_path(m2, r2, SimConfig(0.5), noise=a.noise)
    assert np.abs(restore_level(b.states, c) - a.states).max() <= 1e-12


@SETTINGS
@given(arrays(np.float64, (20, 3), elements=st.floats(-100, 100)), arrays(np.float64, 3, elements=st.floats(-100, 100)))
def test_cov_shift_invariant(x, shift):
    a, b = mc_moments(x), mc_moments(x + shift)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-9 * (1 + np.abs(a.cov).max()))


@SETTINGS
@given(arrays(np.float64, (2, 2), elements=st.floats(-5, 5)), st.integers(2, 10**6))
def test_compare_identical_passes(a, n):
    c = a @ a.T
    rep = compare_cov(c, c, n)
    assert rep.passed and rep.rel_frobenius == 0


@SETTINGS
@given(st.integers(0, 2**31), st.floats(0.1, 10), st.floats(-5, 5))
def test_gaussianity_affine_invariant(seed, scale, loc):
    x = np.random.default_rng(seed).standard_normal((300, 2))
    a, b = gaussianity_check(x), gaussianity_check(scale * x + loc)
    np.testing.assert_allclose(a.skewness, b.skewness, atol=1e-9)
    np.testing.assert_allclose(a.excess_kurtosis, b.excess_kurtosis, atol=1e-9)


@SETTINGS
@given(st.integers(0, 10**6), st.integers(2, 500), st.sampled_from(["ito", "heun"]))
def test_config_resolution_idempotent(seed, paths, scheme):
    raw = {
        "grid": {"x_min": -4.0, "x_max": 4.0, "n_points": 64, "boundary": "periodic"},
        "model": {"fields": [{"kind": "additive", "shape": {"type": "gaussian", "amplitude": 1.0, "center": 0.0, "width": 1.0}}]},
        "sim": {"t_end": 0.5, "scheme": scheme},
        "experiment": {"seed": seed, "paths": paths},
    }
    exp = parse_config(raw)
    again = parse_config(dumps(exp.resolved))
    assert dumps(again.resolved) == dumps(exp.resolved)
