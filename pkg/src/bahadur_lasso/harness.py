"""Seeded Monte Carlo replication of the estimation experiments.

Every replication ``i`` draws its data from ``substream(base_seed + i, 0)``;
other randomness in that replication (bootstrap draws, CV folds, interior
candidates) comes from further keyed substreams of the same seed, so results
do not depend on execution order or the number of workers.
"""

from __future__ import annotations

import logging
import math
import re
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bundles import RNG_ALGORITHM, JointModel, substream, w_vector
from .dgp import CausalDGP, ConditionalDGP, UnconditionalDGP
from .localized import (
    LocalDesign,
    build_local_design,
    design_penalty,
    fit_local_first_order,
    fit_local_plugin,
    local_lambda_max,
    local_marginals_at,
)
from .marginals import (
    KernelSpec,
    bootstrap_box_local,
    bootstrap_box_unconditional,
    fit_marginals_local,
    fit_marginals_unconditional,
)
from .solver import (
    PenaltySpec,
    SolverOptions,
    features_unconditional,
    fit_adversarial_approx,
    fit_first_order,
    fit_plugin,
    lambda_max,
)
from .tables import to_csv as _csv
from .tuning import bandwidth_rule, cross_validate_lambda, lambda_grid, lambda_value, weights

logger = logging.getLogger(__name__)

TABLE_ESTIMATORS = ("plugin_I", "plugin_II", "fo_I", "fo_II", "oracle_I", "oracle_II")
EXTRA_ESTIMATORS = ("adversarial_I", "adversarial_II", "saa")
LAMBDA_MODES = ("cv", "theory")
METRICS = ("rmse", "max_prob_err", "mean_prob_err")
FACTOR_FLOOR = 1e-3

ESTIMATOR_LABELS = {
    "plugin_I": "PI (w_I)", "plugin_II": "PI (w_II)",
    "fo_I": "FO (w_I)", "fo_II": "FO (w_II)",
    "oracle_I": "PI (oracle w_I)", "oracle_II": "PI (oracle w_II)",
    "adversarial_I": "ADV (w_I)", "adversarial_II": "ADV (w_II)",
    "saa": "SAA",
}


class ScenarioError(ValueError):
    """Unknown scenario name or inconsistent scenario settings."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings of one replication experiment."""

    scenario: str = "unconditional"
    s: int = 2
    N: int = 500
    reps: int = 50
    base_seed: int = 0
    estimators: tuple[str, ...] = TABLE_ESTIMATORS
    lambda_modes: tuple[str, ...] = LAMBDA_MODES
    delta: float = 0.05
    delta_alpha: float = 0.05
    bootstrap_B: int = 1000
    cv_folds: int = 5
    cv_grid_points: int = 20
    cv_grid_ratio: float = 1e-3
    weights_II: str = "true"
    reweight_iters: int = 2
    redraw_marginals: bool = False
    anchor: float = 0.5
    bandwidth: Optional[float] = None
    bandwidth_rule: str = "log_p"
    kernel: str = "floor-shifted-quadratic"
    scaled_slope_weights: bool = False
    n_random: int = 64
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.scenario not in ("unconditional", "conditional", "causal"):
            raise ScenarioError(f"unknown scenario kind {self.scenario!r}")
        if self.reps < 1:
            raise ScenarioError("reps must be at least 1")
        bad = [e for e in self.estimators if e not in TABLE_ESTIMATORS + EXTRA_ESTIMATORS]
        if bad:
            raise ScenarioError(f"unknown estimators {bad}")
        if self.scenario == "conditional" and any(e.startswith("adversarial") for e in self.estimators):
            raise ScenarioError("the adversarial heuristic is only available without covariates")
        bad = [m for m in self.lambda_modes if m not in LAMBDA_MODES]
        if bad:
            raise ScenarioError(f"unknown lambda modes {bad}")
        if self.weights_II not in ("true", "iterative"):
            raise ScenarioError("weights_II must be 'true' or 'iterative'")

    @property
    def M(self) -> int:
        return 4

    def resolved_bandwidth(self) -> float:
        if self.bandwidth is not None:
            return float(self.bandwidth)
        d = 1
        return bandwidth_rule(self.bandwidth_rule, self.N, self.M, d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimators"] = list(self.estimators)
        out["lambda_modes"] = list(self.lambda_modes)
        out["rng"] = RNG_ALGORITHM
        if self.scenario != "unconditional":
            out["bandwidth_resolved"] = self.resolved_bandwidth()
        return out


_SCENARIO_RE = re.compile(r"^(unconditional|conditional)-s(\d+)$|^causal-s(\d+)-n(\d+)$")


def scenario_config(name: str, **overrides) -> ExperimentConfig:
    """Built-in scenarios.

    ``unconditional-s2``/``-s5`` use N=500; ``conditional-s2``/``-s5`` use
    N=100, x=0.5 and h=0.1634; ``causal-s{0,2,5,10}-n{200,300,400}`` use 100
    replications.
    """
    m = _SCENARIO_RE.match(name)
    if not m:
        raise ScenarioError(
            f"unknown scenario {name!r}; expected unconditional-s{{2,5}}, conditional-s{{2,5}} "
            "or causal-s{0,2,5,10}-n{200,300,400}"
        )
    if m.group(1):
        kind, s = m.group(1), int(m.group(2))
        if s not in (2, 5):
            raise ScenarioError(f"{kind} scenarios exist for s in (2, 5), got s={s}")
        base = dict(scenario=kind, s=s, reps=50)
        if kind == "unconditional":
            base.update(N=500)
        else:
            base.update(N=100, anchor=0.5, bandwidth=0.1634)
    else:
        s, n = int(m.group(3)), int(m.group(4))
        if s not in (0, 2, 5, 10) or n not in (200, 300, 400):
            raise ScenarioError(f"causal scenarios exist for s in (0,2,5,10), N in (200,300,400); got {name}")
        base = dict(scenario="causal", s=s, N=n, reps=100, estimators=("fo_I",), lambda_modes=("theory",))
    base.update(overrides)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def metrics(
    r_hat: ArrayLike,
    model_truth: JointModel,
    alpha_hat: ArrayLike,
    r_true: Optional[ArrayLike] = None,
) -> Dict[str, float]:
    """Squared coefficient error and probability errors of one fit.

    ``rmse_contrib`` is ``||r_hat - r0||^2``; aggregation averages it over
    replications and takes the square root. Probabilities use the fitted
    ``(alpha_hat, r_hat)``. ``r_true`` overrides the vector compared against.
    """
    r_hat = np.asarray(r_hat, dtype=float)
    r0 = model_truth.r if r_true is None else np.asarray(r_true, dtype=float)
    p_true = model_truth.pmf_table()
    p_hat = JointModel(np.asarray(alpha_hat, dtype=float), np.asarray(r_hat)[: model_truth.p]).pmf_table()
    err = np.abs(p_hat - p_true)
    return {
        "rmse_contrib": float(np.sum((r_hat - r0) ** 2)),
        "max_prob_err": float(err.max()),
        "mean_prob_err": float(p_true @ err),
    }


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ReplicationReport:
    """Raw per-replication values and their aggregates.

    ``raw`` rows are ``(rep, estimator, lambda_mode, metric, value)``; for
    ``rmse`` the stored value is the squared error.
    """

    config: ExperimentConfig
    raw: List[tuple] = field(default_factory=list)
    failures: List[tuple] = field(default_factory=list)
    fits: List[tuple] = field(default_factory=list)

    def values(self, estimator: str, mode: str, metric: str) -> NDArray[np.float64]:
        return np.array([r[4] for r in self.raw if r[1] == estimator and r[2] == mode and r[3] == metric])

    def summary(self) -> List[dict]:
        rows = []
        for est in self.config.estimators:
            for mode in self.config.lambda_modes:
                for met in METRICS:
                    v = self.values(est, mode, met)
                    v = v[np.isfinite(v)]
                    n = v.size
                    if n == 0:
                        mean = se = float("nan")
                    elif met == "rmse":
                        ms = float(v.mean())
                        mean = math.sqrt(ms)
                        se = float(v.std(ddof=1) / math.sqrt(n) / (2 * mean)) if n > 1 and mean > 0 else 0.0
                    else:
                        mean = float(v.mean())
                        se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
                    failed = sum(1 for f in self.failures if f[1] == est and f[2] == mode)
                    rows.append(dict(estimator=est, lambda_mode=mode, metric=met,
                                     mean=mean, se=se, n=n, failed=failed))
        return rows

    def mean(self, estimator: str, mode: str, metric: str) -> float:
        for row in self.summary():
            if (row["estimator"], row["lambda_mode"], row["metric"]) == (estimator, mode, metric):
                return row["mean"]
        raise KeyError((estimator, mode, metric))

    def summary_csv(self) -> str:
        return _csv(["estimator", "lambda_mode", "metric", "mean", "se", "n", "failed"],
                    [[r["estimator"], r["lambda_mode"], r["metric"], r["mean"], r["se"], r["n"], r["failed"]]
                     for r in self.summary()])

    def raw_csv(self) -> str:
        return _csv(["rep", "estimator", "lambda_mode", "metric", "value"], self.raw)

    def fits_csv(self) -> str:
        return _csv(["rep", "estimator", "lambda_mode", "lambda", "converged", "nonzeros"], self.fits)

    def failures_csv(self) -> str:
        return _csv(["rep", "estimator", "lambda_mode", "error"], self.failures)

    def render(self) -> str:
        return render_table(self)


def render_table(report: ReplicationReport, digits: int = 4) -> str:
    """Plain-text table with one row per estimator and (metric, lambda) columns."""
    modes = report.config.lambda_modes
    summ = {(r["estimator"], r["lambda_mode"], r["metric"]): r["mean"] for r in report.summary()}
    head = ["Estimator"] + [f"{m}[{l}]" for m in METRICS for l in modes]
    lines = [head]
    for est in report.config.estimators:
        row = [ESTIMATOR_LABELS.get(est, est)]
        row += [f"{summ[(est, l, m)]:.{digits}f}" for m in METRICS for l in modes]
        lines.append(row)
    widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in lines) + "\n"


# ---------------------------------------------------------------------------
# Unconditional replications
# ---------------------------------------------------------------------------


def _split(est: str) -> tuple[str, str]:
    if est == "saa":
        return "saa", "I"
    kind, scheme = est.rsplit("_", 1)
    return kind, scheme


def _theory_rule(kind: str, local: bool) -> str:
    base = {"plugin": "PI", "fo": "FO", "adversarial": "FO", "oracle": "oracle"}[kind]
    return f"theory_local_{base}" if local else f"theory_{base}"


def _factors(W: NDArray, r: NDArray) -> NDArray:
    return np.maximum(1.0 + W @ r, FACTOR_FLOOR)


class _UncondRep:
    """One replication's data and per-estimator fitting closures.

    Marginals, features, boxes and weights are cached per (estimator, rows) so
    a CV path reuses them; path fits are warm-started from the previous lambda.
    """

    def __init__(self, cfg: ExperimentConfig, dgp: UnconditionalDGP, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.model, self.Y = dgp.draw(cfg.N, substream(seed, 0))
        self.alpha0 = self.model.alpha
        self.opts = SolverOptions()
        self._prep: dict = {}

    def prepare(self, kind: str, scheme: str, rows: Optional[NDArray], stream: int) -> dict:
        key = (kind, scheme, stream, None if rows is None else rows.tobytes())
        if key in self._prep:
            return self._prep[key]
        Y = self.Y if rows is None else self.Y[rows]
        alpha = self.alpha0 if kind == "oracle" else fit_marginals_unconditional(Y)
        W, G = features_unconditional(Y, alpha)
        box = None
        if kind in ("fo", "adversarial"):
            box = bootstrap_box_unconditional(Y, alpha, self.cfg.delta_alpha, self.cfg.bootstrap_B,
                                              substream(self.seed, stream, 1))
        w = None
        if scheme == "I":
            w = weights("I", W)
        elif self.cfg.weights_II == "true":
            w = weights("II", W, factors=_factors(W, self.model.r))
        prep = dict(Y=Y, n=Y.shape[0], alpha=alpha, W=W, G=G, box=box, w=w, theta=None)
        self._prep[key] = prep
        return prep

    def _solve(self, kind: str, prep: dict, lam: float, w: NDArray, stream: int, warm: bool):
        pen = PenaltySpec(lam, w)
        theta0 = prep["theta"] if warm else None
        for start in ((theta0, None) if theta0 is not None else (None,)):
            try:
                if kind == "fo":
                    return fit_first_order(prep["W"], prep["G"], prep["alpha"], prep["box"], pen, self.opts,
                                           theta0=start)
                if kind == "adversarial":
                    return fit_adversarial_approx(prep["Y"], prep["alpha"], prep["box"], pen, self.opts,
                                                  self.cfg.n_random, substream(self.seed, stream, 2))
                return fit_plugin(prep["W"], pen, self.opts, theta0=start)
            except ValueError:
                if start is None:
                    raise
        raise AssertionError("unreachable")

    def fit(self, kind: str, scheme: str, lam: Optional[float], rows: Optional[NDArray] = None,
            stream: int = 1, warm: bool = False) -> tuple[NDArray, NDArray, float, bool]:
        """Fit on ``rows``; returns ``(r_hat, alpha_used, lambda, converged)``.

        ``lam=None`` selects the theory rule.
        """
        prep = self.prepare(kind, scheme, rows, stream)
        if kind == "saa":
            return prep["W"].mean(axis=0), prep["alpha"], float("nan"), True
        if lam is None:
            lam = lambda_value(_theory_rule(kind, False), prep["n"], self.cfg.M, delta=self.cfg.delta)
        w = prep["w"]
        if w is None:
            w = weights("I", prep["W"])
            for _ in range(max(1, self.cfg.reweight_iters)):
                r = self._solve(kind, prep, lam, w, stream, False).r_hat
                w = weights("II", prep["W"], factors=_factors(prep["W"], r))
        res = self._solve(kind, prep, lam, w, stream, warm)
        prep["theta"] = res.r_hat
        return res.r_hat, prep["alpha"], lam, res.converged

    def cv_lambda(self, kind: str, scheme: str) -> float:
        alpha = self.alpha0 if kind == "oracle" else fit_marginals_unconditional(self.Y)
        W = w_vector(self.Y, alpha)
        lam_max = lambda_max(W, weights("I", W))
        grid = lambda_grid(lam_max, self.cfg.cv_grid_points, self.cfg.cv_grid_ratio)

        def fit_fn(train, test, lam):
            r, a, _, _ = self.fit(kind, scheme, lam, rows=train, stream=2, warm=True)
            return 1.0 + w_vector(self.Y[test], a) @ r

        out = cross_validate_lambda(fit_fn, self.Y.shape[0], grid, self.cfg.cv_folds,
                                    substream(self.seed, 3))
        return out.lam


def _run_unconditional_rep(cfg: ExperimentConfig, i: int):
    dgp = UnconditionalDGP.setup(cfg.s, redraw_marginals=cfg.redraw_marginals)
    seed = cfg.base_seed + i
    rep = _UncondRep(cfg, dgp, seed)
    raw, fails, fits = [], [], []
    for est in cfg.estimators:
        kind, scheme = _split(est)
        for mode in cfg.lambda_modes:
            try:
                lam = None
                if mode == "cv" and kind != "saa":
                    lam = rep.cv_lambda(kind, scheme)
                r_hat, alpha, lam_used, conv = rep.fit(kind, scheme, lam)
                m = metrics(r_hat, rep.model, alpha)
            except Exception as exc:  # recorded, excluded from aggregates
                fails.append((i, est, mode, f"{type(exc).__name__}: {exc}"))
                continue
            raw += [(i, est, mode, "rmse", m["rmse_contrib"]),
                    (i, est, mode, "max_prob_err", m["max_prob_err"]),
                    (i, est, mode, "mean_prob_err", m["mean_prob_err"])]
            fits.append((i, est, mode, lam_used, conv, int(np.count_nonzero(r_hat))))
    return raw, fails, fits


# ---------------------------------------------------------------------------
# Conditional replications
# ---------------------------------------------------------------------------


class _CondRep:
    def __init__(self, cfg: ExperimentConfig, dgp: ConditionalDGP, seed: int):
        self.cfg = cfg
        self.dgp = dgp
        self.seed = seed
        self.X, self.Y = dgp.draw(cfg.N, substream(seed, 0))
        self.h = cfg.resolved_bandwidth()
        self.kernel = KernelSpec(cfg.kernel, self.h, 1)
        self.x = np.array([cfg.anchor])
        self.opts = SolverOptions()

    def design(self, kind: str, rows: Optional[NDArray] = None) -> LocalDesign:
        X = self.X if rows is None else self.X[rows]
        Y = self.Y if rows is None else self.Y[rows]
        fn = self.dgp.alpha if kind == "oracle" else None
        return build_local_design(X, Y, self.x, self.kernel, alpha_fn=fn)

    def alpha_at_anchor(self, kind: str, rows: Optional[NDArray] = None) -> NDArray:
        if kind == "oracle":
            return self.dgp.alpha(self.x)[0]
        X = self.X if rows is None else self.X[rows]
        Y = self.Y if rows is None else self.Y[rows]
        return fit_marginals_local(X, Y, self.x, self.kernel).alpha_hat

    def penalty(self, des: LocalDesign, scheme: str, lam: float, fit_fn=None):
        scaled = self.cfg.scaled_slope_weights
        if scheme == "I":
            return design_penalty(des, lam, "I", scaled_slopes=scaled)
        if self.cfg.weights_II == "true":
            r_i = self.dgp.r(des.X[:, 0])
            f = np.maximum(1.0 + np.sum(des.W * r_i, axis=1), FACTOR_FLOOR)
            return design_penalty(des, lam, "II", factors=f, scaled_slopes=scaled)
        pen = design_penalty(des, lam, "I", scaled_slopes=scaled)
        for _ in range(max(1, self.cfg.reweight_iters)):
            a, b = fit_fn(pen)
            r_i = a[None, :] + (des.X - des.anchor) @ b.T
            f = np.maximum(1.0 + np.sum(des.W * r_i, axis=1), FACTOR_FLOOR)
            pen = design_penalty(des, lam, "II", factors=f, scaled_slopes=scaled)
        return pen

    def fit(self, kind: str, scheme: str, lam: Optional[float], rows: Optional[NDArray] = None,
            stream: int = 1):
        des = self.design(kind, rows)
        n = des.n_total
        if kind == "saa":
            k = des.kernel_weights
            a = (k @ des.W) / k.sum()
            return a, np.zeros((des.p, 1)), float("nan"), True
        if lam is None:
            lam = lambda_value(_theory_rule(kind, True), n, self.cfg.M, d=1, h=self.h, delta=self.cfg.delta)
        box = None
        if kind == "fo":
            X = self.X if rows is None else self.X[rows]
            Y = self.Y if rows is None else self.Y[rows]
            box = bootstrap_box_local(fit_marginals_local(X, Y, self.x, self.kernel), self.cfg.delta_alpha,
                                      self.cfg.bootstrap_B, substream(self.seed, stream, 1))

        def solve(pen):
            if kind == "fo":
                return fit_local_first_order(des, box, pen, self.opts)
            return fit_local_plugin(des, pen, self.opts)

        pen = self.penalty(des, scheme, lam, lambda p: (lambda f: (f.a, f.b))(solve(p)))
        f = solve(pen)
        return f.a, f.b, lam, f.converged

    def cv_lambda(self, kind: str, scheme: str) -> float:
        des = self.design(kind)
        pen = design_penalty(des, 1.0, "I", scaled_slopes=self.cfg.scaled_slope_weights)
        lam_max = local_lambda_max(des, pen.lam_w)
        grid = lambda_grid(lam_max, self.cfg.cv_grid_points, self.cfg.cv_grid_ratio)

        def fit_fn(train, test, lam):
            a, b, _, _ = self.fit(kind, scheme, lam, rows=train, stream=2)
            Xt, Yt = self.X[test], self.Y[test]
            kw = self.kernel.weights(Xt, self.x)
            pos = kw > 0
            if not np.any(pos):
                return np.zeros(0), np.zeros(0)
            if kind == "oracle":
                alpha = self.dgp.alpha(Xt[pos])
            else:
                alpha = local_marginals_at(self.X[train], self.Y[train], Xt[pos], self.kernel)
            r_i = a[None, :] + (Xt[pos, None] - self.x) @ b.T
            return 1.0 + np.sum(w_vector(Yt[pos], alpha) * r_i, axis=1), kw[pos]

        return cross_validate_lambda(fit_fn, self.Y.shape[0], grid, self.cfg.cv_folds,
                                     substream(self.seed, 3)).lam

    def metrics(self, kind: str, a: NDArray, b: NDArray) -> Dict[str, float]:
        """Error of ``(a, h b)`` against ``(r0(x), h r0'(x))`` and probability errors at ``x``."""
        r0 = self.dgp.r(self.x)[0]
        b0 = self.dgp.slope()
        truth = JointModel(self.dgp.alpha(self.x)[0], r0)
        m = metrics(a, truth, self.alpha_at_anchor(kind))
        m["rmse_contrib"] = float(np.sum((a - r0) ** 2) + self.h**2 * np.sum((b[:, 0] - b0) ** 2))
        m["rmse_level"] = float(np.sum((a - r0) ** 2))
        return m


def _run_conditional_rep(cfg: ExperimentConfig, i: int):
    dgp = ConditionalDGP.setup(cfg.s)
    seed = cfg.base_seed + i
    rep = _CondRep(cfg, dgp, seed)
    raw, fails, fits = [], [], []
    for est in cfg.estimators:
        kind, scheme = _split(est)
        for mode in cfg.lambda_modes:
            try:
                lam = None
                if mode == "cv" and kind != "saa":
                    lam = rep.cv_lambda(kind, scheme)
                a, b, lam_used, conv = rep.fit(kind, scheme, lam)
                m = rep.metrics(kind, a, b)
            except Exception as exc:
                fails.append((i, est, mode, f"{type(exc).__name__}: {exc}"))
                continue
            raw += [(i, est, mode, "rmse", m["rmse_contrib"]),
                    (i, est, mode, "max_prob_err", m["max_prob_err"]),
                    (i, est, mode, "mean_prob_err", m["mean_prob_err"])]
            fits.append((i, est, mode, lam_used, conv, int(np.count_nonzero(a) + np.count_nonzero(b))))
    return raw, fails, fits


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def _map_reps(fn: Callable, cfg: ExperimentConfig) -> list:
    if cfg.jobs > 1 and cfg.reps > 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=cfg.jobs)(delayed(fn)(cfg, i) for i in range(cfg.reps))
    return [fn(cfg, i) for i in range(cfg.reps)]


def run_experiment(config: ExperimentConfig) -> ReplicationReport:
    """Run all replications of an unconditional or conditional experiment."""
    if config.scenario == "unconditional":
        fn = _run_unconditional_rep
    elif config.scenario == "conditional":
        fn = _run_conditional_rep
    else:
        raise ScenarioError("causal scenarios are run with run_coverage_study")
    report = ReplicationReport(config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        outs = _map_reps(fn, config)
    for raw, fails, fits in outs:
        report.raw.extend(raw)
        report.failures.extend(fails)
        report.fits.extend(fits)
    return report


# ---------------------------------------------------------------------------
# Factor diagnostics
# ---------------------------------------------------------------------------


@dataclass
class FactorDiagnostics:
    quantiles: Dict[float, float]
    bin_edges: NDArray[np.float64]
    counts: NDArray[np.int64]
    n: int

    def quantiles_csv(self) -> str:
        return _csv(["quantile", "value"], [(q, v) for q, v in self.quantiles.items()])

    def histogram_csv(self) -> str:
        return _csv(["bin_lo", "bin_hi", "count"],
                    [(self.bin_edges[j], self.bin_edges[j + 1], int(c)) for j, c in enumerate(self.counts)])


def factor_values(config: ExperimentConfig, seed: int) -> NDArray[np.float64]:
    """``1 + W(alpha0, Y_i)' r0`` for one simulated sample."""
    if config.scenario == "unconditional":
        model, Y = UnconditionalDGP.setup(config.s, redraw_marginals=config.redraw_marginals).draw(
            config.N, substream(seed, 0))
        return model.factor(Y)
    dgp = ConditionalDGP.setup(config.s)
    X, Y = dgp.draw(config.N, substream(seed, 0))
    return 1.0 + np.sum(w_vector(Y, dgp.alpha(X)) * dgp.r(X), axis=1)


def factor_diagnostics(
    config: ExperimentConfig,
    reps: Optional[int] = None,
    seed: Optional[int] = None,
    probs: Sequence[float] = (0.25, 0.5, 0.75),
    bins: int = 30,
) -> FactorDiagnostics:
    """Pooled quantiles and histogram of the factor ``1 + W'r0`` across replications."""
    reps = config.reps if reps is None else reps
    seed = config.base_seed if seed is None else seed
    vals = np.concatenate([factor_values(config, seed + i) for i in range(reps)])
    q = {float(p): float(np.quantile(vals, p)) for p in probs}
    counts, edges = np.histogram(vals, bins=bins)
    return FactorDiagnostics(q, edges, counts, vals.size)


# ---------------------------------------------------------------------------
# Causal coverage study
# ---------------------------------------------------------------------------


@dataclass
class CoverageReport:
    """Per-replication AIPW results and the coverage matrix (method x level)."""

    config: ExperimentConfig
    methods: tuple[str, ...]
    raw: List[tuple] = field(default_factory=list)
    failures: List[tuple] = field(default_factory=list)

    def coverage(self) -> Dict[tuple[str, int], float]:
        out: Dict[tuple[str, int], List[int]] = {}
        for rep, m, lvl, tau, se, truth, cov, perr in self.raw:
            out.setdefault((m, lvl), []).append(cov)
        return {k: float(np.mean(v)) for k, v in out.items()}

    def mean_coverage(self, method: str) -> float:
        vals = [v for (m, _), v in self.coverage().items() if m == method]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_propensity_error(self, method: str) -> float:
        vals = [r[7] for r in self.raw if r[1] == method]
        return float(np.mean(vals)) if vals else float("nan")

    def coverage_csv(self) -> str:
        cov = self.coverage()
        levels = sorted({lvl for _, lvl in cov})
        rows = [[lvl] + [cov.get((m, lvl), float("nan")) for m in self.methods] for lvl in levels]
        return _csv(["level"] + list(self.methods), rows)

    def raw_csv(self) -> str:
        return _csv(["rep", "method", "level", "tau", "se", "truth", "covered", "prop_err"], self.raw)

    def failures_csv(self) -> str:
        return _csv(["rep", "method", "error"], self.failures)

    def render(self) -> str:
        lines = [f"{'method':8s}  coverage  prop_err"]
        for m in self.methods:
            lines.append(f"{m:8s}  {self.mean_coverage(m):.4f}    {self.mean_propensity_error(m):.4f}")
        return "\n".join(lines) + "\n"


def _run_coverage_rep(cfg: ExperimentConfig, i: int, methods: tuple[str, ...], gps_cfg, K: int):
    from .causal import (CausalDataset, cross_fit_folds, estimate_ate, fit_gps, outcome_predictions,
                         true_ates)

    dgp = CausalDGP(s=cfg.s)
    seed = cfg.base_seed + i
    O, T, X = dgp.draw(cfg.N, substream(seed, 0))
    data = CausalDataset(O, T, X)
    folds = cross_fit_folds(data.n, K, substream(seed, 3))
    truth_e = dgp.propensity(X)
    raw, fails = [], []
    try:
        mu = outcome_predictions(data, folds)
    except Exception as exc:
        return [], [(i, m, f"{type(exc).__name__}: {exc}") for m in methods]
    for m in methods:
        try:
            gps = fit_gps(data, m, folds, gps_cfg, rng_seed=seed, truth=lambda x: dgp.propensity(x[:, 0]))
            res = estimate_ate(data, gps, mu_hat=mu)
        except Exception as exc:
            fails.append((i, m, f"{type(exc).__name__}: {exc}"))
            continue
        truth = true_ates(dgp, res.contrasts)
        cov = res.covers(truth)
        perr = float(np.mean(np.abs(gps.e_hat - truth_e)))
        for c, (t, _) in enumerate(res.contrasts):
            raw.append((i, m, t, res.tau[c], res.se[c], truth[c], int(cov[c]), perr))
    return raw, fails


def run_coverage_study(
    config: ExperimentConfig,
    methods: Sequence[str] = ("MNL", "NW", "plugin", "FO"),
    gps_config=None,
    folds: int = 5,
) -> CoverageReport:
    """AIPW confidence-interval coverage for every non-control level and GPS method."""
    from .causal import GPSConfig

    if config.scenario != "causal":
        raise ScenarioError("coverage studies need a causal scenario")
    if gps_config is None:
        gps_config = GPSConfig(bandwidth=config.bandwidth, delta=config.delta, delta_alpha=config.delta_alpha,
                               bootstrap_B=config.bootstrap_B, kernel=config.kernel)
    methods = tuple(methods)

    def one(cfg, i):
        return _run_coverage_rep(cfg, i, methods, gps_config, folds)

    report = CoverageReport(config, methods)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        outs = _map_reps(one, config)
    for raw, fails in outs:
        report.raw.extend(raw)
        report.failures.extend(fails)
    return report
