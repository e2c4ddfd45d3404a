import itertools
import math

import numpy as np
import pytest

from bahadur_lasso.bundles import JointModel
from bahadur_lasso.dgp import DGPError, UnconditionalDGP
from bahadur_lasso.harness import (
    ExperimentConfig,
    ReplicationReport,
    ScenarioError,
    factor_diagnostics,
    metrics,
    run_coverage_study,
    run_experiment,
    scenario_config,
)


def walk_pmf(alpha, r, M):
    # independent per-outcome evaluation of the expansion
    bundles = [c for k in range(2, M + 1) for c in itertools.combinations(range(M), k)]
    out = []
    for bits in range(2**M):
        y = [(bits >> j) & 1 for j in range(M)]
        z = [(y[j] - alpha[j]) / math.sqrt(alpha[j] * (1 - alpha[j])) for j in range(M)]
        f = 1.0 + sum(r[l] * math.prod(z[j] for j in b) for l, b in enumerate(bundles))
        base = math.prod(alpha[j] if y[j] else 1 - alpha[j] for j in range(M))
        out.append(f * base)
    return np.array(out)


def test_zero_fit_rmse_is_truth_norm():
    model = UnconditionalDGP.setup(2).model()
    m = metrics(np.zeros(11), model, model.alpha)
    assert math.sqrt(m["rmse_contrib"]) == pytest.approx(math.sqrt(0.339**2 + 0.249**2), abs=1e-12)


def test_probability_errors_match_table_walk():
    model = UnconditionalDGP.setup(2).model()
    alpha_hat = np.array([0.6, 0.5, 0.64, 0.52])
    r_hat = np.zeros(11)
    r_hat[7] = -0.2
    m = metrics(r_hat, model, alpha_hat)
    p_true = walk_pmf(model.alpha, model.r, 4)
    p_hat = walk_pmf(alpha_hat, r_hat, 4)
    assert m["max_prob_err"] == pytest.approx(np.max(np.abs(p_hat - p_true)), abs=1e-12)
    assert m["mean_prob_err"] == pytest.approx(np.sum(p_true * np.abs(p_hat - p_true)), abs=1e-12)


def test_summary_uses_root_mean_square():
    cfg = ExperimentConfig(estimators=("plugin_I",), lambda_modes=("theory",), reps=2)
    rep = ReplicationReport(cfg, raw=[(0, "plugin_I", "theory", "rmse", 0.04), (1, "plugin_I", "theory", "rmse", 0.16)])
    assert rep.mean("plugin_I", "theory", "rmse") == pytest.approx(math.sqrt(0.1))


def test_scenario_names():
    c = scenario_config("conditional-s2")
    assert (c.N, c.anchor, c.bandwidth) == (100, 0.5, 0.1634)
    assert scenario_config("unconditional-s5").N == 500
    assert scenario_config("causal-s10-n300").reps == 100
    for bad in ("unconditional-s3", "causal-s1-n400", "foo"):
        with pytest.raises(ScenarioError):
            scenario_config(bad)


def test_config_validation():
    with pytest.raises(ScenarioError):
        ExperimentConfig(estimators=("lasso",))
    with pytest.raises(ScenarioError):
        ExperimentConfig(scenario="conditional", estimators=("adversarial_I",))
    d = scenario_config("conditional-s2").to_dict()
    assert d["rng"] == "numpy.Philox" and d["bandwidth_resolved"] == 0.1634


def test_unconditional_run_is_deterministic():
    cfg = scenario_config("unconditional-s2", reps=2, lambda_modes=("theory",),
                          estimators=("plugin_I", "fo_II", "oracle_I", "adversarial_I", "saa"))
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a.raw_csv() == b.raw_csv() and a.summary_csv() == b.summary_csv()
    assert not a.failures
    assert len(a.values("fo_II", "theory", "rmse")) == 2


def test_conditional_run():
    cfg = scenario_config("conditional-s2", reps=2, lambda_modes=("theory",), estimators=("plugin_I", "fo_I"))
    rep = run_experiment(cfg)
    assert not rep.failures
    assert np.all(np.isfinite(rep.values("fo_I", "theory", "rmse")))
    assert "FO (w_I)" in rep.render()


def test_cv_mode_runs():
    cfg = scenario_config("unconditional-s2", reps=1, lambda_modes=("cv",), estimators=("plugin_I",))
    rep = run_experiment(cfg)
    assert rep.fits[0][3] > 0


def test_redrawn_invalid_marginals_abort():
    dgp = UnconditionalDGP.setup(2, redraw_marginals=True)
    outcomes = []
    for seed in range(20):
        try:
            dgp.draw(10, seed)
            outcomes.append(True)
        except DGPError:
            outcomes.append(False)
    assert not all(outcomes)


def test_factor_diagnostics_shapes():
    diag = factor_diagnostics(scenario_config("conditional-s5"), reps=3)
    assert list(diag.quantiles) == [0.25, 0.5, 0.75]
    assert diag.counts.sum() == diag.n == 300
    assert diag.quantiles_csv().startswith("quantile,value\n")


def test_coverage_study_small():
    cfg = scenario_config("causal-s0-n200", reps=2)
    rep = run_coverage_study(cfg, methods=("MNL", "oracle"))
    assert len(rep.raw) == 2 * 2 * 15
    assert 0 <= rep.mean_coverage("MNL") <= 1
    assert rep.coverage_csv().splitlines()[0] == "level,MNL,oracle"


def test_true_model_metrics_are_zero():
    model = JointModel([0.3, 0.6, 0.5], np.array([0.1, 0.0, -0.05, 0.02]))
    m = metrics(model.r, model, model.alpha)
    assert m["rmse_contrib"] == 0 and m["max_prob_err"] == 0
