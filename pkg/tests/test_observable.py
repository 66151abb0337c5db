import json

import numpy as np
import pytest

from otdenoise.errors import Infeasible, MeasureError, Unsupported
from otdenoise.likelihood import GaussianLocation, UniformScale, stream_rng
from otdenoise.measures import DiscreteMeasure, empirical_measure
from otdenoise.observable import (DeltaTable, RelaxationInstance, empirical_bayes_risk,
                                  gradient_E_tau, gradient_descent, kernel_matrix, mu_delta_draws,
                                  mu_delta_sample, objective_E_tau, objective_E_tau_discrete,
                                  population_instance, solve_relaxation, tau_sweep_convergence)
from otdenoise.ot import OTConfig
from otdenoise.posterior import posterior_mean_discrete

GL = GaussianLocation(1.0)
PRIOR = empirical_measure([-1.0, 1.0])


def joint(n, seed):
    rng = stream_rng(seed, 5)
    thetas = rng.choice([-1.0, 1.0], size=(n, 1))
    zs = thetas + rng.normal(size=(n, 1))
    return thetas, zs, posterior_mean_discrete(GL, PRIOR, zs)


def test_mu_delta_true_latents_matches_mu():
    thetas, zs, _ = joint(4000, 0)
    draws = mu_delta_sample(GL, DeltaTable(thetas), 1, stream_rng(0, 6)).atoms
    # same generative law: moments agree within Monte Carlo error
    se = zs.std() / np.sqrt(len(zs))
    assert abs(draws.mean() - zs.mean()) < 6 * se
    assert abs(draws.var() - zs.var()) < 0.15


def test_mu_delta_shapes_and_noiseless_limit():
    one = mu_delta_draws(GL, DeltaTable([[0.3]]), 1, stream_rng(1, 0))
    assert one.shape == (1, 1, 1)
    vals = np.array([[-0.5], [0.2], [1.1]])
    tight = mu_delta_sample(GaussianLocation(1e-6), DeltaTable(vals), 4, stream_rng(1, 1))
    np.testing.assert_allclose(tight.atoms.reshape(3, 4), np.repeat(vals, 4, axis=1), atol=1e-4)
    with pytest.raises(ValueError):
        mu_delta_draws(GL, DeltaTable(vals), 0, 0)


def test_objective_bayes_point_huge_tau():
    thetas, zs, tb = joint(30, 1)
    r = empirical_bayes_risk(thetas, tb)
    val = objective_E_tau(GL, zs, tb, DeltaTable(tb), 1e12, 10, stream_rng(1, 2), r_bayes=r)
    assert val == pytest.approx(r, rel=1e-9)
    direct = objective_E_tau(GL, zs, tb, DeltaTable(tb), 1e12, 10, stream_rng(1, 2), thetas=thetas)
    assert direct == pytest.approx(r, rel=1e-9)


def test_objective_noiseless_identity_copy():
    _, zs, tb = joint(8, 2)
    model = GaussianLocation(1e-6)
    val = objective_E_tau(model, zs, tb, DeltaTable(zs), 1.0, 1, stream_rng(2, 0))
    fit = np.mean((zs - tb) ** 2)
    assert val - fit == pytest.approx(0.0, abs=1e-10)


def test_gradient_huge_tau_is_first_term():
    _, zs, tb = joint(5, 3)
    delta = DeltaTable(tb + 0.3)
    res = gradient_E_tau(GL, zs, tb, delta, 1e8, 20, stream_rng(3, 0))
    np.testing.assert_array_equal(res.first_term, 2 * (delta.values - tb))
    np.testing.assert_allclose(res.gradient, res.first_term, atol=1e-6)


def test_gradient_stationary_symmetric_toy():
    zs = np.array([[-1.0], [1.0]])
    draws = np.repeat(zs[:, None, :], 3, axis=1)
    res = gradient_E_tau(GL, zs, zs, DeltaTable(zs), 1.0, 3, None, draws=draws)
    np.testing.assert_allclose(res.gradient, 0.0, atol=1e-12)
    assert res.penalty == pytest.approx(0.0, abs=1e-12)


def test_gradient_needs_differentiable_model():
    with pytest.raises(Unsupported):
        gradient_E_tau(UniformScale(), [[0.5]], [[1.0]], DeltaTable([[1.0]]), 1.0, 2, 0)


def test_descent_zero_step_constant():
    _, zs, tb = joint(6, 4)
    trace = gradient_descent(GL, zs, tb, DeltaTable(zs), 1.0, 0.0, 5, 10, seed=4)
    for d in trace.deltas:
        np.testing.assert_array_equal(d, zs)


def test_descent_weak_penalty_moves_toward_bayes():
    rng = stream_rng(5, 0)
    thetas = rng.normal(size=(50, 1))
    zs = thetas + rng.normal(size=(50, 1))
    tb = zs / 2
    trace = gradient_descent(GL, zs, tb, DeltaTable(zs), 10.0, 0.2, 10, 10, seed=5)
    first = np.mean((trace.deltas[0] - tb) ** 2)
    last = np.mean((trace.deltas[-1] - tb) ** 2)
    assert last < first


def test_descent_from_relaxation_optimum_is_stationary():
    thetas, zs, tb = joint(4, 6)
    tau = 1.0
    inst = RelaxationInstance.build(GL, zs, np.linspace(-3, 3, 61), np.linspace(-5, 5, 41), tau)
    start = solve_relaxation(inst, tb).delta
    K = 50
    # noise band: spread of the Monte Carlo objective at the start point
    vals = [objective_E_tau(GL, zs, tb, DeltaTable(start), tau, K, stream_rng(6, 9, k))
            for k in range(20)]
    band = 3 * np.std(vals)
    trace = gradient_descent(GL, zs, tb, DeltaTable(start), tau, 0.05, 10, K, seed=6,
                             common_random_numbers=True)
    assert max(trace.objectives) <= trace.objectives[0] + band


def test_kernel_rows_and_infeasible():
    P = kernel_matrix(GL, np.linspace(-1, 1, 5), np.linspace(-4, 4, 33))
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    with pytest.raises(Infeasible):
        kernel_matrix(UniformScale(), [[1.0], [2.0]], np.linspace(3, 5, 4))


def test_instance_validation_and_json():
    inst = RelaxationInstance.build(GL, [-0.5, 0.5], [-1.0, 0.0, 1.0], np.linspace(-3, 3, 7), 0.5)
    back = RelaxationInstance.from_json(json.loads(json.dumps(inst.to_json())))
    np.testing.assert_array_equal(back.likelihood_matrix, inst.likelihood_matrix)
    assert back.tau == 0.5
    with pytest.raises(MeasureError):
        RelaxationInstance([0.0], [0.0, 1.0], [0.0], np.ones((2, 1)) * 2, 1.0)
    with pytest.raises(ValueError):
        inst.with_tau(0.0)


def test_relaxation_huge_tau_snaps_theta_bar():
    _, zs, tb = joint(4, 7)
    grid = np.linspace(-2, 2, 41)
    inst = RelaxationInstance.build(GL, zs, grid, np.linspace(-5, 5, 41), 1e9)
    res = solve_relaxation(inst, tb)
    snapped = grid[np.argmin(np.abs(tb - grid[None, :]), axis=1)][:, None]
    np.testing.assert_allclose(res.delta, snapped, atol=1e-9)
    fit = np.mean((snapped - tb) ** 2)
    assert res.value == pytest.approx(fit, abs=1e-7)


def test_relaxation_identity_adjacent_instance():
    _, zs, tb = joint(4, 8)
    inst = RelaxationInstance.build(GL, zs, np.arange(-3, 3.0005, 0.003), np.linspace(-5, 5, 41), 1.0)
    res = solve_relaxation(inst, tb)
    assert res.split_rows.size == 0 or res.split_rows.size == 1
    obj = objective_E_tau_discrete(inst, tb, res.delta)
    assert obj == pytest.approx(res.value, abs=1e-6)


def sweep_instance():
    G = DiscreteMeasure(np.linspace(-1.5, 1.5, 7), [0.1, 0.15, 0.2, 0.1, 0.2, 0.15, 0.1])
    inst, tb = population_instance(GaussianLocation(0.5), G, np.linspace(-2.5, 2.5, 30), 1.0)
    return inst, tb, G


def test_sweep_gamma2_approaches_prior():
    inst, tb, G = sweep_instance()
    rows = tau_sweep_convergence(inst, tb, G, [10.0, 1.0, 0.1, 0.01])
    assert rows[-1].gamma2_w2 < 1e-3 < rows[0].gamma2_w2
    assert all(r.bound_ok for r in rows)


def test_sweep_rejects_increasing_taus():
    inst, tb, G = sweep_instance()
    with pytest.raises(ValueError):
        tau_sweep_convergence(inst, tb, G, [0.1, 1.0])


def test_sweep_huge_tau_distance_is_bayes_gap():
    from otdenoise.denoiser import build_ot_denoiser
    inst, tb, G = sweep_instance()
    row = tau_sweep_convergence(inst, tb, G, [1e9])[0]
    grid = inst.theta_grid[:, 0]
    snapped = grid[np.argmin(np.abs(tb - grid[None, :]), axis=1)]
    ref = build_ot_denoiser(inst.z_atoms, tb, G, weights=inst.z_weights).values[:, 0]
    expected = inst.z_weights @ (snapped - ref) ** 2
    assert row.distance == pytest.approx(expected, abs=1e-9)


def test_sweep_non_identifiable_runs():
    # every latent atom induces the same observation law: nothing to recover
    theta = np.linspace(0.0, 1.0, 5)
    z3 = np.linspace(0.05, 0.95, 10)
    P = np.full((5, 10), 0.1)
    inst = RelaxationInstance(z3, theta, z3, P, 1.0)
    G = empirical_measure(theta)
    tb = np.full((10, 1), 0.5)
    rows = tau_sweep_convergence(inst, tb, G, [1.0, 0.1, 0.01])
    assert all(np.isfinite(r.distance) for r in rows)
