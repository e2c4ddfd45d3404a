import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bahadur_lasso.bundles import substream
from bahadur_lasso.dgp import UnconditionalDGP
from bahadur_lasso.marginals import AdversarialBox, bootstrap_box_unconditional, fit_marginals_unconditional
from bahadur_lasso.solver import (
    PenaltySpec,
    SolverOptions,
    adversarial_objective,
    candidate_alphas,
    features_unconditional,
    first_order_objective,
    fit_adversarial_approx,
    fit_first_order,
    fit_plugin,
    kkt_residual,
    lambda_max,
    loglik,
    plugin_objective,
    soft_threshold,
)
from bahadur_lasso.tuning import lambda_value, weights


def counts_data(n11=30, n10=20, n01=20, n00=30):
    rows = [[1, 1]] * n11 + [[1, 0]] * n10 + [[0, 1]] * n01 + [[0, 0]] * n00
    return np.array(rows, dtype=np.int8)


def setup_problem(seed, N=300, s=2):
    _, Y = UnconditionalDGP.setup(s).draw(N, substream(seed, 0))
    a = fit_marginals_unconditional(Y)
    W, G = features_unconditional(Y, a)
    return Y, a, W, G


def plugin_gradient(W, r):
    f = 1.0 + W @ r
    return W.T @ (1.0 / f) / W.shape[0]


def test_closed_form_unpenalized_fit():
    Y = counts_data()
    W, _ = features_unconditional(Y, [0.5, 0.5])
    res = fit_plugin(W, PenaltySpec(0.0, np.ones(1)))
    assert res.converged
    assert res.r_hat[0] == pytest.approx(0.2, abs=1e-8)


def test_kill_threshold_gives_exact_zero():
    _, _, W, _ = setup_problem(1)
    w = weights("I", W)
    lam = lambda_max(W, w)
    res = fit_plugin(W, PenaltySpec(lam, w))
    assert np.all(res.r_hat == 0.0)
    res = fit_plugin(W, PenaltySpec(0.99 * lam, w))
    assert np.count_nonzero(res.r_hat) >= 1


def test_soft_threshold():
    np.testing.assert_allclose(soft_threshold(np.array([-2.0, 0.5, 3.0]), np.array(1.0)), [-1.0, 0.0, 2.0])


def test_kkt_residual_definition():
    theta = np.array([0.0, 1.0])
    grad = np.array([0.5, 2.0])
    assert kkt_residual(theta, grad, np.array([1.0, 1.0])) == pytest.approx(1.0)
    assert kkt_residual(theta, grad, np.array([0.4, 2.0])) == pytest.approx(0.1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.02, 0.3))
def test_plugin_kkt_independent_check(seed, lam):
    _, _, W, _ = setup_problem(seed, N=200)
    w = weights("I", W)
    res = fit_plugin(W, PenaltySpec(lam, w))
    assert res.converged
    g = plugin_gradient(W, res.r_hat)
    assert kkt_residual(res.r_hat, g, lam * w) < 10 * SolverOptions().abs_tol


def test_plugin_objective_improves_on_zero():
    _, _, W, _ = setup_problem(2)
    pen = PenaltySpec(0.05, weights("I", W))
    res = fit_plugin(W, pen)
    assert plugin_objective(W, res.r_hat, pen) >= plugin_objective(W, np.zeros(W.shape[1]), pen) - 1e-12
    assert res.objective == pytest.approx(plugin_objective(W, res.r_hat, pen), abs=1e-10)


def test_fitted_factors_positive():
    _, _, W, _ = setup_problem(3)
    res = fit_plugin(W, PenaltySpec(0.01, weights("I", W)))
    assert (1.0 + W @ res.r_hat).min() > 0


def test_loglik_infeasible_is_minus_inf():
    W = np.array([[1.0], [-1.0]])
    assert loglik(W, [1.5]) == -np.inf


def test_zero_width_box_matches_plugin():
    _, a, W, G = setup_problem(4)
    pen = PenaltySpec(0.05, weights("I", W))
    fo = fit_first_order(W, G, a, AdversarialBox.point(a), pen)
    pi = fit_plugin(W, pen)
    np.testing.assert_allclose(fo.r_hat, pi.r_hat, atol=1e-8)


def test_first_order_bounds_plugin_and_is_optimal():
    Y, a, W, G = setup_problem(5, N=500)
    box = bootstrap_box_unconditional(Y, a, rng_seed=1)
    pen = PenaltySpec(0.05, weights("I", W))
    fo = fit_first_order(W, G, a, box, pen)
    pi = fit_plugin(W, pen)
    assert fo.converged
    assert box.contains_level(fo.active_alpha)
    for r in (fo.r_hat, pi.r_hat, 0.5 * pi.r_hat):
        assert first_order_objective(W, G, a, box, r, pen) <= plugin_objective(W, r, pen) + 1e-12
    assert first_order_objective(W, G, a, box, fo.r_hat, pen) >= first_order_objective(W, G, a, box, pi.r_hat, pen) - 1e-10


def test_first_order_objective_is_vertex_minimum():
    Y, a, W, G = setup_problem(6)
    box = bootstrap_box_unconditional(Y, a, rng_seed=2)
    pen = PenaltySpec(0.05, weights("I", W))
    fo = fit_first_order(W, G, a, box, pen)
    direct = first_order_objective(W, G, a, box, fo.r_hat, pen)
    assert fo.objective == pytest.approx(direct, abs=1e-9)


def test_adversarial_objective_dominates_first_order():
    Y, a, W, G = setup_problem(7, N=500)
    box = bootstrap_box_unconditional(Y, a, delta_alpha=0.5, rng_seed=3)
    pen = PenaltySpec(0.03, weights("I", W))
    fo = fit_first_order(W, G, a, box, pen)
    adv = fit_adversarial_approx(Y, a, box, pen, n_random=16, rng_seed=1)
    assert adv.heuristic
    cands = candidate_alphas(box, n_random=16, rng_seed=1)
    assert adversarial_objective(Y, cands, adv.r_hat, pen) >= adversarial_objective(Y, cands, fo.r_hat, pen) - 1e-6


def test_first_order_requires_estimate_in_box():
    _, a, W, G = setup_problem(8)
    box = AdversarialBox(a + 0.01, a + 0.02)
    with pytest.raises(ValueError):
        fit_first_order(W, G, a, box, PenaltySpec(0.05, weights("I", W)))


def test_penalty_spec_validation():
    with pytest.raises(ValueError):
        PenaltySpec(-1.0, np.ones(2))
    with pytest.raises(ValueError):
        PenaltySpec(1.0, np.array([1.0, 0.0]))


def test_warm_start_reaches_same_solution():
    _, _, W, _ = setup_problem(9)
    pen = PenaltySpec(0.03, weights("I", W))
    cold = fit_plugin(W, pen)
    warm = fit_plugin(W, pen, theta0=cold.r_hat * 0.5)
    np.testing.assert_allclose(warm.r_hat, cold.r_hat, atol=1e-7)


def test_theory_lambda_kills_noise_on_independent_data():
    rng = substream(10, 0)
    Y = (rng.random((500, 4)) < 0.5).astype(np.int8)
    a = fit_marginals_unconditional(Y)
    W, _ = features_unconditional(Y, a)
    lam = lambda_value("theory_PI", 500, 4)
    res = fit_plugin(W, PenaltySpec(lam, weights("I", W)))
    assert np.all(res.r_hat == 0.0)
