import itertools

import numpy as np
import pytest

from otdenoise.errors import DimError, ZeroRow
from otdenoise.measures import DiscreteMeasure, TransportPlan, empirical_measure, squared_distances
from otdenoise.ot import (OTConfig, barycentric_projection, c_transform_extend, round_to_polytope,
                          sinkhorn_potentials, solve_monotone_1d, solve_ot, w2_squared)


def brute_force(x, y):
    c = squared_distances(x, y)
    n = len(x)
    return min(c[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n


def test_identical_marginals_identity_plan():
    m = empirical_measure([0.0, 1.0])
    p = solve_ot(m, m)
    np.testing.assert_allclose(p.dense(), np.eye(2) / 2, atol=1e-12)
    assert p.cost_value == pytest.approx(0.0, abs=1e-12)


def test_two_point_monotone():
    a, b = empirical_measure([0.0, 2.0]), empirical_measure([1.0, 3.0])
    p = solve_ot(a, b)
    np.testing.assert_allclose(p.dense(), np.eye(2) / 2, atol=1e-12)
    assert p.cost_value == pytest.approx(1.0, abs=1e-12)
    assert w2_squared(a, b) == pytest.approx(1.0, abs=1e-12)


def test_five_point_2d_brute_force():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    p = solve_ot(empirical_measure(x), empirical_measure(y))
    assert p.cost_value == pytest.approx(brute_force(x, y), abs=1e-9)


def test_lp_duals_strong_duality():
    rng = np.random.default_rng(4)
    a = DiscreteMeasure.normalized(rng.normal(size=(6, 2)), rng.random(6) + 0.1)
    b = DiscreteMeasure.normalized(rng.normal(size=(4, 2)), rng.random(4) + 0.1)
    p = solve_ot(a, b)
    c = squared_distances(a.atoms, b.atoms)
    assert np.max(p.dual_source[:, None] + p.dual_target[None, :] - c) <= 1e-9
    dual = p.dual_source @ a.weights + p.dual_target @ b.weights
    assert dual == pytest.approx(p.cost_value, abs=1e-9)


def test_w2_point_masses():
    m = empirical_measure([[1.0, -2.0], [0.5, 0.5]])
    assert w2_squared(m, m) == pytest.approx(0.0, abs=1e-12)
    assert w2_squared(empirical_measure([0.0]), empirical_measure([2.0])) == pytest.approx(4.0)


def test_w2_dimension_mismatch():
    with pytest.raises(DimError):
        w2_squared(empirical_measure([0.0]), empirical_measure([(0.0, 1.0)]))


def test_callable_and_matrix_cost():
    a, b = empirical_measure([0.0, 2.0]), empirical_measure([1.0, 3.0])
    p1 = solve_ot(a, b, lambda x, y: np.abs(x - y.T))
    p2 = solve_ot(a, b, np.abs(a.atoms - b.atoms.T))
    assert p1.cost_value == pytest.approx(p2.cost_value)
    with pytest.raises(DimError):
        solve_ot(a, b, np.zeros((3, 2)))
    with pytest.raises(ValueError):
        solve_ot(a, b, -np.ones((2, 2)))


def test_monotone_examples():
    a, b = empirical_measure([0.0, 2.0]), empirical_measure([1.0, 3.0])
    p = solve_monotone_1d(a, b)
    np.testing.assert_allclose(p.dense(), np.eye(2) / 2)
    assert p.cost_value == pytest.approx(1.0)
    skew = DiscreteMeasure([0.0, 1.0], [0.25, 0.75])
    q = solve_monotone_1d(skew, empirical_measure([0.0, 1.0])).dense()
    np.testing.assert_allclose(q, [[0.25, 0.0], [0.25, 0.5]])
    same = solve_monotone_1d(skew, skew)
    np.testing.assert_allclose(same.dense(), np.diag([0.25, 0.75]))
    assert same.cost_value == 0.0


def test_monotone_matches_lp_unequal_weights():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = DiscreteMeasure.normalized(rng.normal(size=7), rng.random(7) + 0.05)
        b = DiscreteMeasure.normalized(rng.normal(size=5), rng.random(5) + 0.05)
        assert solve_monotone_1d(a, b).cost_value == pytest.approx(solve_ot(a, b).cost_value, abs=1e-10)


def test_monotone_rejects_2d():
    with pytest.raises(DimError):
        solve_monotone_1d(empirical_measure([(0.0, 1.0)]), empirical_measure([(0.0, 1.0)]))


def test_sinkhorn_approaches_exact():
    rng = np.random.default_rng(6)
    a, b = empirical_measure(rng.normal(size=(5, 2))), empirical_measure(rng.normal(size=(6, 2)))
    exact = solve_ot(a, b).cost_value
    p = solve_ot(a, b, cfg=OTConfig("sinkhorn", epsilon=1e-3, max_iters=100_000, tolerance=1e-10))
    assert abs(p.cost_value - exact) < 1e-2
    np.testing.assert_allclose(p.dense().sum(axis=1), a.weights, atol=1e-9)


def test_sinkhorn_potentials_value():
    a, b = empirical_measure([0.0, 1.0]), empirical_measure([0.5, 2.0])
    cfg = OTConfig("sinkhorn", epsilon=1.0, max_iters=100_000, tolerance=1e-12)
    v, f, g = sinkhorn_potentials(a, b, None, cfg)
    assert v == pytest.approx(f @ a.weights + g @ b.weights)
    # the plan built from the potentials has the prescribed marginals
    plan = np.exp((f[:, None] + g[None, :] - squared_distances(a.atoms, b.atoms)) / 1.0)
    np.testing.assert_allclose(plan.sum(axis=0), b.weights, atol=1e-10)


def test_round_to_polytope_marginals():
    rng = np.random.default_rng(7)
    a = rng.random(4)
    a /= a.sum()
    b = rng.random(3)
    b /= b.sum()
    P = round_to_polytope(rng.random((4, 3)) * 0.1, a, b)
    np.testing.assert_allclose(P.sum(axis=1), a, atol=1e-12)
    np.testing.assert_allclose(P.sum(axis=0), b, atol=1e-12)
    assert P.min() >= 0


def test_barycentric_projection():
    a, b = empirical_measure([0.0, 2.0]), empirical_measure([1.0, 3.0])
    np.testing.assert_allclose(barycentric_projection(solve_monotone_1d(a, b)).ravel(), [1, 3])
    src = DiscreteMeasure([5.0], [1.0])
    tgt = empirical_measure([0.0, 2.0])
    p = TransportPlan(np.array([[0.5, 0.5]]), src, tgt, 0.0)
    assert barycentric_projection(p)[0, 0] == 1.0


def test_barycentric_projection_zero_row():
    src = DiscreteMeasure([0.0, 1.0], [1.0, 0.0])
    tgt = DiscreteMeasure([0.0], [1.0])
    with pytest.raises(ZeroRow):
        barycentric_projection(TransportPlan(np.array([[1.0], [0.0]]), src, tgt, 0.0))


def test_c_transform_examples():
    y = DiscreteMeasure([1.5], [1.0])
    phi = c_transform_extend([0.0], y)
    assert phi(0.0) == pytest.approx(2.25)
    two = c_transform_extend([0.0, 0.0], empirical_measure([0.0, 2.0]))
    xs = np.linspace(-1, 3, 9)
    np.testing.assert_allclose(two(xs), np.minimum(xs ** 2, (xs - 2) ** 2))


def test_c_transform_matches_lp_duals():
    rng = np.random.default_rng(8)
    a, b = empirical_measure(rng.normal(size=(4, 2))), empirical_measure(rng.normal(size=(4, 2)))
    p = solve_ot(a, b)
    phi = c_transform_extend(p.dual_target, b)
    np.testing.assert_allclose(phi(a.atoms), p.dual_source, atol=1e-7)
