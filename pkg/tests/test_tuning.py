import math
import warnings

import numpy as np
import pytest
from scipy.stats import norm

from bahadur_lasso.bundles import substream
from bahadur_lasso.dgp import UnconditionalDGP
from bahadur_lasso.marginals import fit_marginals_unconditional
from bahadur_lasso.solver import PenaltySpec, features_unconditional, fit_plugin, lambda_max
from bahadur_lasso.tuning import (
    LambdaRule,
    WeightFloorWarning,
    WeightScheme,
    bandwidth_rule,
    cross_validate_lambda,
    fold_assignment,
    iterative_weights,
    lambda_grid,
    lambda_value,
    local_weights,
    weights,
)


def test_oracle_lambda_value():
    assert lambda_value("theory_oracle", 500, 4) == pytest.approx(0.1269, abs=5e-5)


def test_unconditional_rules_add_nuisance_terms():
    base = norm.ppf(1 - 0.05 / 22) / math.sqrt(500)
    assert lambda_value("theory_PI", 500, 4) == pytest.approx(base + 4 / math.sqrt(500), rel=1e-12)
    assert lambda_value("theory_FO", 500, 4) == pytest.approx(base + math.sqrt(4 / 500), rel=1e-12)


def test_local_first_order_rule():
    N, M, d, h, p = 100, 4, 1, 0.1634, 11
    expected = norm.ppf(1 - 0.05 / (2 * p * (d + 1))) / math.sqrt(N * h) + M / (N * h) + M * d**2 * h**4
    assert lambda_value("theory_local_FO", N, M, h=h) == pytest.approx(expected, rel=1e-12)


def test_lambda_rule_validation():
    with pytest.raises(ValueError):
        LambdaRule("theory_XX")
    with pytest.raises(ValueError):
        lambda_value("cv", 100, 4)
    with pytest.raises(ValueError):
        lambda_value("theory_FO", 0, 4)


def test_grid_descending_and_spans_ratio():
    g = lambda_grid(2.0, 20, 1e-3)
    assert g.size == 20 and g[0] == pytest.approx(2.0) and g[-1] == pytest.approx(2e-3)
    assert np.all(np.diff(g) < 0)


def test_fold_assignment_balanced_and_seeded():
    f = fold_assignment(103, 5, 1)
    assert np.bincount(f).max() - np.bincount(f).min() <= 1
    assert np.array_equal(f, fold_assignment(103, 5, 1))


def test_scheme_one_is_feature_rms():
    W = np.array([[1.0, 2.0], [3.0, -2.0]])
    np.testing.assert_allclose(weights("I", W), [math.sqrt(5.0), 2.0])


def test_scheme_two_bounded_by_factor_range():
    model, Y = UnconditionalDGP.setup(2).draw(500, substream(0, 0))
    W, _ = features_unconditional(Y, model.alpha)
    f = model.factor(Y)
    w1, w2 = weights("I", W), weights("II", W, factors=f)
    ratio = w2 / w1
    assert np.all(ratio >= 1 / f.max() - 1e-12) and np.all(ratio <= 1 / f.min() + 1e-12)


def test_scheme_two_needs_factors():
    with pytest.raises(ValueError):
        weights("II", np.ones((3, 2)))
    with pytest.raises(ValueError):
        WeightScheme("II")


def test_zero_column_weight_is_floored():
    W = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.warns(WeightFloorWarning):
        w = weights("I", W)
    assert w[1] > 0


def test_local_weights_shapes():
    rng = substream(1, 0)
    W = rng.standard_normal((50, 3))
    X = rng.random(50)
    lw, sw = local_weights("I", W, X, [0.5], np.full(50, 1 / 50))
    assert lw.shape == (3,) and sw.shape == (3, 1)
    _, sw_scaled = local_weights("I", W, X, [0.5], np.full(50, 1 / 50), bandwidth=0.5)
    np.testing.assert_allclose(sw_scaled, sw / 0.5)


def test_iterative_weights_converge_to_pilot_factors():
    _, Y = UnconditionalDGP.setup(2).draw(500, substream(2, 0))
    a = fit_marginals_unconditional(Y)
    W, _ = features_unconditional(Y, a)
    lam = lambda_value("theory_oracle", 500, 4)
    w, r = iterative_weights(W, lambda w: fit_plugin(W, PenaltySpec(lam, w)).r_hat, reweight_iters=2)
    np.testing.assert_allclose(w, weights("II", W, factors=1 + W @ r))


def test_bandwidth_rules():
    assert bandwidth_rule("log_p", 100, 4) == pytest.approx((math.log(11) / 100) ** 0.2)
    assert bandwidth_rule("optimal", 100, 4, delta_N=0.5) == pytest.approx((64 / 50) ** 0.25)
    with pytest.raises(ValueError):
        bandwidth_rule("silverman", 100, 4)


def _cv_closure(W):
    wts = weights("I", W)

    def fit(train, test, lam):
        r = fit_plugin(W[train], PenaltySpec(lam, wts)).r_hat
        return 1.0 + W[test] @ r

    return fit, wts


def test_cv_prefers_large_lambda_on_noise():
    Y = (substream(3, 0).random((400, 4)) < 0.5).astype(np.int8)
    W, _ = features_unconditional(Y, fit_marginals_unconditional(Y))
    fit, wts = _cv_closure(W)
    grid = lambda_grid(lambda_max(W, wts), 12)
    cv = cross_validate_lambda(fit, 400, grid, rng_seed=1)
    r = fit_plugin(W, PenaltySpec(cv.lam, wts)).r_hat
    assert np.count_nonzero(r) <= 2
    assert cv.lam >= grid[4]


def test_cv_infeasible_fold_scores_floor():
    def fit(train, test, lam):
        raise ValueError("infeasible")

    cv = cross_validate_lambda(fit, 20, [1.0, 0.5], folds=2, rng_seed=0)
    assert np.all(cv.scores == math.log(1e-8))
    assert cv.lam == 1.0


@pytest.mark.slow
def test_cv_lambda_below_plugin_theory_on_most_seeds():
    lam_pi = lambda_value("theory_PI", 500, 4)
    below = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in range(50):
            _, Y = UnconditionalDGP.setup(2).draw(500, substream(seed, 0))
            W, _ = features_unconditional(Y, fit_marginals_unconditional(Y))
            fit, wts = _cv_closure(W)
            cv = cross_validate_lambda(fit, 500, lambda_grid(lambda_max(W, wts)), rng_seed=substream(seed, 3))
            below += cv.lam <= lam_pi
    assert below / 50 >= 0.8
