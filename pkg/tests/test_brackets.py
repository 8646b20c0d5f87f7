import csv

import numpy as np
import pytest

from hjm_hypo import (
    MU,
    BracketWord,
    FieldModel,
    Yield,
    additive,
    exp_decay,
    frozen,
    generate_basis,
    hormander_verdict,
    lie_bracket,
    make_grid,
    mu_bracket,
    numeric_rank,
)
from hjm_hypo.brackets import RankReport, default_window
from hjm_hypo.fields import AffineClamped, Logistic, scalar_gate

from conftest import bump_model, expdecay_model, gate_model, gate_r0, gaussian


def _project_out(v, span):
    q, _ = np.linalg.qr(np.column_stack(span))
    return v - q @ (q.T @ v)


def test_word_labels():
    w = BracketWord((0,)).extend(MU).extend(1)
    assert w.depth == 2
    assert w.label() == "[s1,[mu,s0]]"
    with pytest.raises(ValueError):
        BracketWord((MU, 0))


def test_additive_fields_commute(periodic_grid):
    a = additive(periodic_grid, gaussian)
    b = additive(periodic_grid, lambda x: np.sin(x))
    np.testing.assert_array_equal(lie_bracket(a, b, periodic_grid.zeros()), 0.0)


def test_self_bracket_zero(periodic_grid):
    m = gate_model(periodic_grid)
    f = m.sigmas[0]
    np.testing.assert_array_equal(lie_bracket(f, f, gate_r0(periodic_grid)), 0.0)


def test_gate_vs_additive_closed_form(periodic_grid):
    g = periodic_grid
    gate = Logistic(10.0, 0.03, 1.0, 0.5)
    f = scalar_gate(g, lambda x: 0.05 * gaussian(x), Yield(1.0), gate)
    h2 = additive(g, lambda x: 0.02 * np.cos(x))
    r = gate_r0(g)
    expected = gate.deriv(f.row @ r) * (f.row @ h2.profile) * f.profile
    ex = lie_bracket(f, h2, r)
    np.testing.assert_allclose(ex, expected, rtol=1e-13)
    fd = lie_bracket(f, h2, r, method="fd")
    assert np.linalg.norm(fd - ex) <= 1e-7 * np.linalg.norm(ex)


def test_antisymmetry_and_bilinearity(periodic_grid, rng):
    g = periodic_grid
    f1 = scalar_gate(g, lambda x: 0.05 * gaussian(x), Yield(1.0), Logistic(10.0, 0.03, 1.0, 0.5))
    f2 = scalar_gate(g, lambda x: 0.03 * np.cos(x), Yield(0.5), AffineClamped(0.5, 10.0, 0.2, 1.5))
    f3 = additive(g, lambda x: 0.01 * np.sin(x))
    r = gate_r0(g)
    for method, tol in (("exact", 1e-15), ("fd", 1e-8)):
        s = lie_bracket(f1, f2, r, method) + lie_bracket(f2, f1, r, method)
        assert np.max(np.abs(s)) <= tol * np.max(np.abs(lie_bracket(f1, f2, r, method))) + 1e-300
    # bilinearity in the second slot with frozen combinations
    a, b = 1.7, -0.4
    combo = frozen(g, a * f2.value(r) + b * f3.value(r))
    lhs = lie_bracket(f1, combo, r)
    rhs = a * lie_bracket(f1, frozen(g, f2.value(r)), r) + b * lie_bracket(f1, frozen(g, f3.value(r)), r)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(lhs)
    lhs_fd = lie_bracket(f1, combo, r, "fd")
    assert np.linalg.norm(lhs_fd - rhs) <= 1e-7 * np.linalg.norm(rhs)


def test_mu_bracket_additive_is_generator(periodic_grid, rng):
    g = periodic_grid
    m = bump_model(g)
    h = m.sigmas[0]
    np.testing.assert_array_equal(mu_bracket(m, h, rng.standard_normal(128)), g.derivative(h.profile))
    v = frozen(g, rng.standard_normal(128))
    np.testing.assert_array_equal(mu_bracket(m, v, g.zeros()), g.derivative(v.profile))


def test_mu_bracket_expdecay_stays_in_span(flat_grid):
    m = expdecay_model(flat_grid, drift="zero")
    h = m.sigmas[0]
    v = mu_bracket(m, h, flat_grid.zeros())
    lo, hi = default_window(flat_grid)
    res = _project_out(v[lo:hi], [h.profile[lo:hi]])
    assert np.linalg.norm(res) <= 1e-6 * np.linalg.norm(v[lo:hi])


def test_mu_bracket_gate_structure(periodic_grid):
    g = periodic_grid
    m = gate_model(g)
    f = m.sigmas[0]
    r = gate_r0(g)
    v = mu_bracket(m, f, r)
    res = _project_out(v - f.phi(r) * g.derivative(f.profile), [g.derivative(f.profile), f.profile])
    assert np.linalg.norm(res) <= 1e-6 * np.linalg.norm(v)
    fd = mu_bracket(m, f, r, method="fd")
    assert np.linalg.norm(fd - v) <= 1e-6 * np.linalg.norm(v)


def test_basis_depth_zero_is_sigma(flat_grid):
    g = flat_grid
    m = FieldModel(g, [exp_decay(g, 0.01, 0.1), additive(g, gaussian)], drift_mode="hjm")
    r0 = np.full(201, 0.03)
    b = generate_basis(m, r0, 0)
    assert [w.label() for w in b.words] == ["s0", "s1"]
    for i, v in enumerate(b.vectors):
        np.testing.assert_array_equal(v, m.sigmas[i].value(r0))


def test_basis_additive_contains_generator_orbit(periodic_grid):
    g = make_grid(-8, 8, 128, "periodic")
    m = bump_model(g)
    b = generate_basis(m, g.zeros(), 6)
    assert [w.label() for w in b.words][:3] == ["s0", "[mu,s0]", "[mu,[mu,s0]]"]
    h = m.sigmas[0].profile
    v = h
    for k in range(7):
        np.testing.assert_allclose(b.vectors[k], v, atol=1e-12)
        v = g.derivative(v)


def test_basis_count_bound_without_pruning(periodic_grid):
    m = gate_model(periodic_grid)
    for L in range(5):
        b = generate_basis(m, gate_r0(periodic_grid), L, prune=False)
        assert len(b.words) <= 2 ** (L + 1) - 1
        assert all(np.sum(b.depths == k) <= 2**k for k in range(L + 1))


def test_basis_depth_guard(periodic_grid):
    with pytest.raises(ValueError):
        generate_basis(bump_model(periodic_grid), periodic_grid.zeros(), 13)


def test_frozen_approx_flag(periodic_grid, flat_grid):
    assert not generate_basis(bump_model(periodic_grid), periodic_grid.zeros(), 4).frozen_approx
    assert generate_basis(gate_model(periodic_grid), gate_r0(periodic_grid), 4).frozen_approx


def test_duplicate_rank_one(periodic_grid):
    g = periodic_grid
    m = FieldModel(g, [additive(g, gaussian), additive(g, gaussian)])
    b = generate_basis(m, g.zeros(), 0, prune=False)
    assert numeric_rank(b).rank == 1


def test_bump_rank_sequence():
    g = make_grid(-8, 8, 128, "periodic")
    rep = numeric_rank(generate_basis(bump_model(g), g.zeros(), 10))
    np.testing.assert_array_equal(rep.rank_at_depth, np.arange(1, 12))
    assert hormander_verdict(rep).kind == "SaturatesH0"


def test_bump_hermite_gram_oracle():
    # depth-k vectors approximate (-1)^k He_k(x) e^{-x^2/2}; compare Gram matrices
    errs = []
    for n in (256, 512):
        g = make_grid(-8, 8, n, "periodic")
        V = generate_basis(bump_model(g), g.zeros(), 4, prune=False).vectors
        x = g.x
        he = [np.ones_like(x), x, x**2 - 1, x**3 - 3 * x, x**4 - 6 * x**2 + 3]
        H = np.array([(-1) ** k * p * np.exp(-(x**2) / 2) for k, p in enumerate(he)])
        gv, gh = V @ V.T * g.dx, H @ H.T * g.dx
        errs.append(np.max(np.abs(gv - gh)) / np.max(np.abs(gh)))
    assert errs[1] < 1e-2
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.1)


def test_rank_refinement_stability():
    ranks = []
    for n in (128, 256):
        g = make_grid(-8, 8, n, "periodic")
        ranks.append(numeric_rank(generate_basis(bump_model(g), g.zeros(), 6)).rank_at_depth)
    np.testing.assert_array_equal(ranks[0], ranks[1])


def test_expdecay_finite_dimensional(flat_grid):
    m = expdecay_model(flat_grid)
    rep = numeric_rank(generate_basis(m, np.full(201, 0.03), 8))
    np.testing.assert_array_equal(rep.rank_at_depth, np.ones(9, dtype=int))
    s = rep.singular_values
    assert s.size == 1 or s[1] / s[0] < 1e-6
    v = hormander_verdict(rep)
    assert (v.kind, v.dim) == ("FiniteDimensional", 1)
    assert str(v) == "FiniteDimensional(1)"


def test_rank_monotone_and_bounded(periodic_grid):
    m = gate_model(periodic_grid)
    rep = numeric_rank(generate_basis(m, gate_r0(periodic_grid), 6))
    assert np.all(np.diff(rep.rank_at_depth) >= 0)
    lo, hi = rep.window
    assert np.all(rep.rank_at_depth <= np.minimum(rep.count_at_depth, hi - lo))


def test_numeric_rank_errors(periodic_grid):
    m = FieldModel(periodic_grid, [additive(periodic_grid, periodic_grid.zeros())])
    b = generate_basis(m, periodic_grid.zeros(), 2)
    with pytest.raises(ValueError):
        numeric_rank(b)
    b2 = generate_basis(bump_model(periodic_grid), periodic_grid.zeros(), 1)
    with pytest.raises(ValueError):
        numeric_rank(b2, window=(10, 10))


def test_verdict_single_depth_inconclusive():
    rep = RankReport(np.array([1.0]), np.array([1]), np.array([1]), (0, 10), 1e-6, 1e-6, False)
    assert hormander_verdict(rep).kind == "Inconclusive"


def test_basis_csv(tmp_path, periodic_grid):
    b = generate_basis(bump_model(periodic_grid), periodic_grid.zeros(), 2)
    b.to_csv(tmp_path / "b.csv")
    with open(tmp_path / "b.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + len(b.words)
    assert rows[2][:2] == ["[mu,s0]", "1"]
    np.testing.assert_array_equal(np.array(rows[2][2:], dtype=float), b.vectors[1])
