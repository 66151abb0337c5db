import json

import numpy as np
import pytest

from otdenoise.errors import DimError, EmptySample, MeasureError
from otdenoise.measures import (DiscreteMeasure, TransportPlan, empirical_measure,
                                pushforward, second_moment, squared_distances)


def test_empirical_measure_uniform():
    m = empirical_measure([0.0, 1.0])
    np.testing.assert_array_equal(m.atoms.ravel(), [0, 1])
    np.testing.assert_allclose(m.weights, [0.5, 0.5])


def test_empirical_measure_keeps_duplicates():
    m = empirical_measure([(0, 0), (0, 0), (3, 4)])
    assert len(m) == 3 and m.dim == 2
    np.testing.assert_allclose(m.weights, [1 / 3] * 3)


def test_empirical_measure_empty():
    with pytest.raises(EmptySample):
        empirical_measure([])


def test_measure_validation():
    with pytest.raises(MeasureError):
        DiscreteMeasure([0.0, 1.0], [0.7, 0.7])
    with pytest.raises(MeasureError):
        DiscreteMeasure([0.0, 1.0], [1.5, -0.5])
    with pytest.raises(MeasureError):
        DiscreteMeasure([0.0, 1.0], [1.0])
    with pytest.raises(DimError):
        DiscreteMeasure(np.zeros((2, 2, 2)), [0.5, 0.5])


def test_normalized_rescales():
    m = DiscreteMeasure.normalized([1.0, 2.0, 3.0], [1, 1, 2])
    np.testing.assert_allclose(m.weights, [0.25, 0.25, 0.5])
    assert m.weights.sum() == 1.0


def test_pushforward_examples():
    m = empirical_measure([0.0, 1.0])
    same = pushforward(m, lambda x: x)
    np.testing.assert_array_equal(same.atoms, m.atoms)
    const = pushforward(m, lambda x: 2.0)
    np.testing.assert_array_equal(const.atoms.ravel(), [2, 2])
    np.testing.assert_allclose(const.weights, [0.5, 0.5])
    sq = pushforward(empirical_measure([-1.0, 1.0]), lambda x: x ** 2)
    np.testing.assert_array_equal(sq.atoms.ravel(), [1, 1])


def test_pushforward_ragged_images():
    with pytest.raises(DimError):
        pushforward(empirical_measure([0.0, 1.0]), lambda x: np.ones(int(x[0]) + 1))


def test_second_moment():
    assert second_moment(empirical_measure([0.0, 2.0])) == 2.0
    assert second_moment(empirical_measure([0.0])) == 0.0
    assert second_moment(empirical_measure([(3.0, 4.0)])) == 25.0


def test_squared_distances_matches_loop():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    ref = np.array([[np.sum((a - b) ** 2) for b in y] for a in x])
    np.testing.assert_allclose(squared_distances(x, y), ref, rtol=1e-14)


def test_measure_json_roundtrip():
    m = DiscreteMeasure([[0.0, 1.0], [2.0, 3.0]], [0.3, 0.7])
    back = DiscreteMeasure.from_json(json.loads(json.dumps(m.to_json())))
    np.testing.assert_array_equal(back.atoms, m.atoms)
    np.testing.assert_array_equal(back.weights, m.weights)


def test_plan_marginal_check():
    a = empirical_measure([0.0, 1.0])
    TransportPlan(np.eye(2) / 2, a, a, 0.0)
    with pytest.raises(MeasureError):
        TransportPlan(np.full((2, 2), 0.3), a, a, 0.0)
    with pytest.raises(MeasureError):
        TransportPlan(np.array([[0.6, -0.1], [-0.1, 0.6]]), a, a, 0.0)


def test_plan_dual_checks():
    a = empirical_measure([0.0, 1.0])
    c = squared_distances(a.atoms, a.atoms)
    TransportPlan(np.eye(2) / 2, a, a, 0.0, [0, 0], [0, 0], cost=c)
    with pytest.raises(MeasureError):  # violates phi + psi <= c
        TransportPlan(np.eye(2) / 2, a, a, 0.0, [1, 0], [0, 0], cost=c)
    with pytest.raises(MeasureError):
        TransportPlan(np.eye(2) / 2, a, a, 0.0, [0, 0], None)


def test_plan_json_roundtrip():
    a = empirical_measure([0.0, 1.0])
    p = TransportPlan(np.eye(2) / 2, a, a, 0.0, [0.0, 0.0], [0.0, 0.0])
    back = TransportPlan.from_json(json.loads(json.dumps(p.to_json())))
    np.testing.assert_array_equal(back.dense(), p.dense())
    np.testing.assert_array_equal(back.dual_source, p.dual_source)
