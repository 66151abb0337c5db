import math

import numpy as np
import pytest
from scipy import integrate, stats

from otdenoise.errors import Degenerate, LowDensity, MatrixError
from otdenoise.likelihood import GaussianLocation, normal_exp_family, stream_rng
from otdenoise.measures import DiscreteMeasure, empirical_measure
from otdenoise.posterior import (PosteriorMeanEstimator, default_bandwidth, isotonic_projection,
                                 kde_log_grad, posterior_mean_discrete, posterior_mean_gaussian,
                                 tweedie_estimate, tweedie_from_score)

GL = GaussianLocation(1.0)


def test_discrete_point_mass():
    prior = DiscreteMeasure([0.4], [1.0])
    np.testing.assert_allclose(posterior_mean_discrete(GL, prior, [-3.0, 0.0, 5.0]), 0.4)


def test_discrete_symmetry():
    assert posterior_mean_discrete(GL, empirical_measure([-2.0, 2.0]), 0.0)[0] == pytest.approx(0.0, abs=1e-15)


def test_discrete_two_point_value():
    val = posterior_mean_discrete(GL, empirical_measure([0.0, 1.0]), 1.0)[0]
    assert val == pytest.approx(1 / (1 + math.exp(-0.5)), rel=1e-12)


def test_discrete_matches_quadrature_ratio():
    prior = DiscreteMeasure([-1.0, 0.5, 2.0], [0.2, 0.5, 0.3])
    z = 0.8
    lik = stats.norm(prior.atoms[:, 0], 1.0).pdf(z) * prior.weights
    assert posterior_mean_discrete(GL, prior, z)[0] == pytest.approx(lik @ prior.atoms[:, 0] / lik.sum())


def test_discrete_far_tail_is_stable():
    val = posterior_mean_discrete(GL, empirical_measure([0.0, 1.0]), 200.0)[0]
    assert val == pytest.approx(1.0)


def test_discrete_zero_density_raises():
    from otdenoise.likelihood import UniformScale
    with pytest.raises(Degenerate):
        posterior_mean_discrete(UniformScale(), empirical_measure([1.0, 2.0]), 5.0)


def test_gaussian_examples():
    assert posterior_mean_gaussian(0.0, 1.0, 1.0, 2.0)[0] == pytest.approx(1.0)
    assert posterior_mean_gaussian(0.7, 2.0, 0.5, 0.7)[0] == pytest.approx(0.7)
    assert posterior_mean_gaussian(0.3, 1e-8, 1.0, 4.0)[0] == pytest.approx(0.3, abs=1e-6)


def test_gaussian_matches_quadrature():
    tau2, z = 2.5, 1.1
    num = integrate.quad(lambda t: t * stats.norm(0, math.sqrt(tau2)).pdf(t) * stats.norm(t, 1).pdf(z), -30, 30)[0]
    den = integrate.quad(lambda t: stats.norm(0, math.sqrt(tau2)).pdf(t) * stats.norm(t, 1).pdf(z), -30, 30)[0]
    assert posterior_mean_gaussian(0.0, tau2, 1.0, z)[0] == pytest.approx(num / den, rel=1e-8)


def test_gaussian_matrix_validation():
    with pytest.raises(MatrixError):
        posterior_mean_gaussian([0.0, 0.0], [[1.0, 2.0], [0.0, 1.0]], np.eye(2), [0.0, 0.0])
    with pytest.raises(MatrixError):
        posterior_mean_gaussian([0.0, 0.0], -np.eye(2), np.eye(2), [0.0, 0.0])


def test_tweedie_with_exact_score():
    # marginal N(0, 2): grad log f = -z / 2
    z = np.array([[2.0], [-0.5]])
    np.testing.assert_allclose(tweedie_from_score(GL, z, -z / 2), z / 2)
    assert tweedie_from_score(GL, [[2.0]], [[-1.0]])[0, 0] == pytest.approx(1.0)


def test_tweedie_exp_family_matches_gaussian():
    s = 0.8
    z = np.array([[0.3], [1.2]])
    g = np.array([[-0.2], [0.4]])
    # natural parameter is the Gaussian mean over s^2
    np.testing.assert_allclose(tweedie_from_score(normal_exp_family(s), z, g) * s ** 2,
                               tweedie_from_score(GaussianLocation(s), z, g))


def test_kde_gradient_matches_finite_differences():
    x = stream_rng(0, 9).normal(size=(200, 2))
    h = 0.4
    z = np.array([[0.3, -0.2]])
    logf, grad = kde_log_grad(x, h, z)
    eps = 1e-6
    for k in range(2):
        e = np.zeros((1, 2))
        e[0, k] = eps
        fd = (kde_log_grad(x, h, z + e)[0] - kde_log_grad(x, h, z - e)[0]) / (2 * eps)
        assert grad[0, k] == pytest.approx(fd[0], rel=1e-6)
    ref = np.mean(stats.multivariate_normal([0, 0], h ** 2 * np.eye(2)).pdf(x - z[0]))
    assert math.exp(logf[0]) == pytest.approx(ref, rel=1e-10)


def test_tweedie_sample_symmetry():
    rng = stream_rng(1, 3)
    zs = rng.normal(size=10_000) + rng.normal(size=10_000)
    assert abs(tweedie_estimate(zs, GL, None, 0.0)[0]) < 0.05


def test_tweedie_translation_equivariance():
    zs = stream_rng(2, 3).normal(size=500) * 1.5
    c = 0.73
    q = np.array([-1.0, 0.2, 1.4])
    a = tweedie_estimate(zs, GL, 0.3, q)
    b = tweedie_estimate(zs + c, GL, 0.3, q + c)
    np.testing.assert_allclose(b - a, c, atol=1e-12)


def test_tweedie_low_density():
    with pytest.raises(LowDensity):
        tweedie_estimate(np.zeros(10), GL, 0.1, 50.0)


def test_default_bandwidth_scale():
    x = np.arange(100.0)
    assert default_bandwidth(x) == pytest.approx(100 ** (-0.2) * np.std(x))


def test_isotonic_projection_monotone():
    g = np.array([3.0, 1.0, 2.0, 0.0])
    v = np.array([1.0, 2.0, 0.0, -1.0])
    out = isotonic_projection(g, v)
    order = np.argsort(g)
    assert np.all(np.diff(out[order]) >= -1e-15)
    np.testing.assert_allclose(isotonic_projection([0, 1, 2], [0.0, 1.0, 2.0]), [0, 1, 2])


def test_estimator_classmethods():
    prior = empirical_measure([-1.0, 1.0])
    d = PosteriorMeanEstimator.discrete(GL, prior)
    np.testing.assert_allclose(d(np.array([0.5, -0.5])).ravel(),
                               posterior_mean_discrete(GL, prior, [0.5, -0.5]).ravel())
    g = PosteriorMeanEstimator.gaussian(0.0, 1.0, 1.0)
    np.testing.assert_allclose(g([2.0, 4.0]).ravel(), [1.0, 2.0])
    t = PosteriorMeanEstimator.tweedie(np.linspace(-2, 2, 50), GL)
    assert t(np.array([0.0])).shape == (1, 1)
    with pytest.raises(ValueError):
        PosteriorMeanEstimator("magic")
