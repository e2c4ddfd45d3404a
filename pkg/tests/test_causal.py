import numpy as np
import pytest

from bahadur_lasso.bundles import all_outcomes, substream
from bahadur_lasso.causal import (
    CausalDataError,
    CausalDataset,
    GPSConfig,
    aipw_contributions,
    cross_fit_folds,
    estimate_ate,
    fit_gps,
    outcome_predictions,
    true_ates,
    true_efficiency_bound,
)
from bahadur_lasso.dgp import CausalDGP, level_code


def causal_sample(seed=0, n=400, s=0):
    dgp = CausalDGP(s=s)
    O, T, X = dgp.draw(n, substream(seed, 0))
    return dgp, CausalDataset(O, T, X)


@pytest.mark.parametrize("s", [0, 2, 5, 10])
def test_true_ate_formula(s):
    dgp = CausalDGP(s=s)
    for t in all_outcomes(4):
        assert dgp.true_ate(t) == pytest.approx(0.15 * level_code(t), abs=1e-12)


def test_true_propensities_are_valid_pmfs():
    for s in (0, 2, 5, 10):
        e = CausalDGP(s=s).propensity(np.arange(1, 10) / 10)
        assert e.min() > 0
        np.testing.assert_allclose(e.sum(axis=1), 1.0, atol=1e-12)


def test_efficiency_bound_independence_oracle():
    dgp = CausalDGP(s=0)
    x = np.arange(1, 10) / 10
    a = dgp.treatment.alpha(x)
    t = np.array([1, 0, 1, 1])
    inv_e = lambda tt: np.mean(np.prod(np.where(tt == 1, 1 / a, 1 / (1 - a)), axis=1))
    tau_x = 0.1 * 13 + 0.1 * 13 * x
    expected = np.var(tau_x) + inv_e(np.zeros(4)) + inv_e(t)
    assert true_efficiency_bound(dgp, t) == pytest.approx(expected, rel=1e-12)


def test_dataset_validation():
    with pytest.raises(CausalDataError):
        CausalDataset(np.zeros(3), np.array([[0, 2], [1, 0], [0, 0]]), np.zeros(3))
    with pytest.raises(CausalDataError):
        CausalDataset(np.zeros(3), np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(CausalDataError):
        CausalDataset(np.array([0.0, np.nan, 1.0]), np.zeros((3, 2)), np.zeros(3))


def test_dataset_csv_roundtrip():
    _, data = causal_sample(1, n=30)
    back = CausalDataset.from_csv(data.to_csv())
    assert np.array_equal(back.O, data.O) and np.array_equal(back.T, data.T) and np.array_equal(back.X, data.X)


def test_unobserved_level_is_an_error():
    _, data = causal_sample(2, n=200)
    keep = np.flatnonzero(data.levels != 15)
    sub = data.subset(keep)
    folds = cross_fit_folds(sub.n, 5, 0)
    gps = fit_gps(sub, "MNL", folds)
    with pytest.raises(CausalDataError):
        estimate_ate(sub, gps)


@pytest.mark.parametrize("method", ["MNL", "NW", "plugin", "FO"])
def test_cross_fitting_poisoning(method):
    _, data = causal_sample(3, n=300)
    folds = cross_fit_folds(data.n, 5, 1)
    cfg = GPSConfig(bootstrap_B=200)
    base_e = fit_gps(data, method, folds, cfg, rng_seed=4).e_hat
    base_mu = outcome_predictions(data, folds)
    rng = substream(5, 0)
    for k in range(5):
        rows = folds == k
        O = data.O.copy()
        T = data.T.copy()
        O[rows] = rng.normal(50.0, 10.0, rows.sum())
        T[rows] = rng.integers(0, 2, size=(rows.sum(), 4))
        poisoned = CausalDataset(O, T, data.X)
        e = fit_gps(poisoned, method, folds, cfg, rng_seed=4).e_hat
        mu = outcome_predictions(poisoned, folds)
        np.testing.assert_array_equal(e[rows], base_e[rows])
        np.testing.assert_array_equal(mu[rows], base_mu[rows])


def test_propensities_clamped_and_normalized():
    dgp, data = causal_sample(6, n=300)
    folds = cross_fit_folds(data.n, 5, 0)
    for method in ("MNL", "NW", "FO"):
        gps = fit_gps(data, method, folds, GPSConfig(bootstrap_B=200))
        assert gps.e_hat.min() >= 1e-3 and gps.e_hat.max() <= 1 - 1e-3
        assert gps.normalization_error < 1e-8
    oracle = fit_gps(data, "oracle", folds, truth=lambda x: dgp.propensity(x[:, 0]))
    np.testing.assert_allclose(oracle.e_hat, np.clip(dgp.propensity(data.X[:, 0]), 1e-3, 1 - 1e-3))


def test_aipw_with_true_nuisances_is_unbiased_in_expectation():
    dgp, data = causal_sample(7, n=4000)
    e = dgp.propensity(data.X[:, 0])
    mu = np.stack([dgp.mean_outcome(np.tile(t, (data.n, 1)), data.X[:, 0]) for t in all_outcomes(4)], axis=1)
    psi = aipw_contributions(data, e, mu, 15, 0)
    se = psi.std() / np.sqrt(data.n)
    assert abs(psi.mean() - 0.15 * 15) < 4 * se


def test_ate_result_interval():
    dgp, data = causal_sample(8)
    folds = cross_fit_folds(data.n, 5, 0)
    gps = fit_gps(data, "oracle", folds, truth=lambda x: dgp.propensity(x[:, 0]))
    res = estimate_ate(data, gps)
    assert len(res.contrasts) == 15
    np.testing.assert_allclose(res.ci[:, 1] - res.ci[:, 0], 2 * 1.959963984540054 * res.se)
    assert res.fold_tau.shape == (15, 5)
    text = res.to_csv(true_ates(dgp, res.contrasts))
    assert text.splitlines()[0] == "level,reference,tau,se,ci_lo,ci_hi,truth,covered"


def test_folds_are_seeded():
    assert np.array_equal(cross_fit_folds(50, 5, 3), cross_fit_folds(50, 5, 3))
    with pytest.raises(ValueError):
        cross_fit_folds(50, 1)


@pytest.mark.slow
def test_oracle_nuisance_coverage():
    dgp = CausalDGP(s=0)
    covered = []
    for i in range(100):
        O, T, X = dgp.draw(400, substream(i, 0))
        data = CausalDataset(O, T, X)
        if data.level_counts().min() == 0:
            continue
        folds = cross_fit_folds(data.n, 5, substream(i, 3))
        gps = fit_gps(data, "oracle", folds, truth=lambda x: dgp.propensity(x[:, 0]))
        mu = outcome_predictions(data, folds, truth=lambda h, x: 0.1 * h + (0.5 + 0.1 * h) * x[:, 0])
        res = estimate_ate(data, gps, mu_hat=mu)
        covered.append(res.covers(true_ates(dgp, res.contrasts)))
    assert 0.89 <= np.mean(covered) <= 0.99
