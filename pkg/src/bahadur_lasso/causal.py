"""Cross-fitted AIPW estimation of effects of multiple binary treatments.

Generalized propensity scores ``e_t(x) = P(T = t | X = x)`` come from the
localized Bahadur fits (first-order or plug-in), from kernel-weighted average
coefficients (``NW``) or from a multinomial logit over the ``2^M`` levels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax
from scipy.stats import norm

from .bundles import all_outcomes, bundle_index, pmf_tables, substream
from .dgp import CausalDGP, level_code
from .localized import build_local_design, design_penalty, fit_local_first_order, fit_local_plugin
from .marginals import InsufficientLocalData, KernelSpec, bootstrap_box_local, fit_marginals_local
from .solver import SolverOptions
from .tuning import bandwidth_rule, fold_assignment, lambda_value

GPSMethod = Literal["FO", "plugin", "NW", "MNL", "oracle"]
GPS_METHODS = ("MNL", "NW", "plugin", "FO")
EPS_PROP = 1e-3


class CausalDataError(ValueError):
    """Malformed dataset or a contrast level that never occurs."""


@dataclass(frozen=True)
class CausalDataset:
    """Outcomes ``O`` (n,), binary treatments ``T`` (n, M) and covariates ``X`` (n, d)."""

    O: NDArray[np.float64]
    T: NDArray[np.int8]
    X: NDArray[np.float64]

    def __post_init__(self) -> None:
        O = np.asarray(self.O, dtype=float).reshape(-1)
        T = np.asarray(self.T)
        X = np.asarray(self.X, dtype=float)
        X = X.reshape(-1, 1) if X.ndim == 1 else X
        if T.ndim != 2 or T.shape[0] != O.shape[0] or X.shape[0] != O.shape[0]:
            raise CausalDataError(f"inconsistent shapes O{O.shape}, T{T.shape}, X{X.shape}")
        if not np.all((T == 0) | (T == 1)):
            raise CausalDataError("treatments must be binary")
        if not (np.all(np.isfinite(O)) and np.all(np.isfinite(X))):
            raise CausalDataError("outcomes and covariates must be finite")
        object.__setattr__(self, "O", O)
        object.__setattr__(self, "T", T.astype(np.int8))
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.O.shape[0]

    @property
    def M(self) -> int:
        return self.T.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def levels(self) -> NDArray[np.int64]:
        """Level code ``H(T_i)`` of each row."""
        return np.asarray(level_code(self.T), dtype=np.int64).reshape(-1)

    def level_counts(self) -> NDArray[np.int64]:
        return np.bincount(self.levels, minlength=2**self.M)

    def sparse_levels(self, min_count: int = 2) -> List[int]:
        """Level codes observed fewer than ``min_count`` times."""
        return [int(h) for h in np.flatnonzero(self.level_counts() < min_count)]

    def subset(self, rows: NDArray) -> "CausalDataset":
        return CausalDataset(self.O[rows], self.T[rows], self.X[rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["O"] + [f"T{j + 1}" for j in range(self.M)] + [f"X{k + 1}" for k in range(self.d)])
        for i in range(self.n):
            w.writerow([f"{self.O[i]:.17g}"] + [int(v) for v in self.T[i]] + [f"{v:.17g}" for v in self.X[i]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CausalDataset":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise CausalDataError("empty dataset")
        head = rows[0]
        t_cols = [i for i, h in enumerate(head) if h.startswith("T")]
        x_cols = [i for i, h in enumerate(head) if h.startswith("X")]
        if "O" not in head or not t_cols or not x_cols:
            raise CausalDataError("header must contain O, T1..TM and X1..Xd columns")
        data = np.array(rows[1:], dtype=float)
        return cls(data[:, head.index("O")], data[:, t_cols].astype(np.int8), data[:, x_cols])


@dataclass(frozen=True)
class GPSConfig:
    """Propensity and outcome-model settings.

    ``bandwidth=None`` uses ``(log p / N)^{1/(d+4)}`` with the full sample
    size. ``anchors=None`` fits at every distinct covariate value that needs a
    prediction; otherwise predictions are interpolated between the anchors.
    """

    kernel: str = "floor-shifted-quadratic"
    bandwidth: Optional[float] = None
    delta: float = 0.05
    delta_alpha: float = 0.05
    bootstrap_B: int = 1000
    eps_prop: float = EPS_PROP
    anchors: Optional[tuple[float, ...]] = None
    mnl_ridge: float = 1e-6
    mnl_maxiter: int = 2000

    def resolved_bandwidth(self, N: int, M: int, d: int) -> float:
        return float(self.bandwidth) if self.bandwidth is not None else bandwidth_rule("log_p", N, M, d)


@dataclass
class GPSModel:
    """Cross-fitted propensities: ``e_hat[i, h]`` is the fold-out estimate of ``e_h(X_i)``."""

    method: str
    folds: NDArray[np.int64]
    e_hat: NDArray[np.float64]
    eps_prop: float
    bandwidth: float
    normalization_error: float = 0.0
    flags: List[str] = field(default_factory=list)

    def propensity(self, level: int) -> NDArray[np.float64]:
        return self.e_hat[:, level]


def _interp_tables(anchors: NDArray, tables: NDArray, x: NDArray) -> NDArray:
    if anchors.shape[0] == 1:
        return np.repeat(tables, x.shape[0], axis=0)
    order = np.argsort(anchors)
    a, t = anchors[order], tables[order]
    return np.stack([np.interp(x, a, t[:, h]) for h in range(t.shape[1])], axis=1)


def _bahadur_tables(
    method: str, train: CausalDataset, points: NDArray, kernel: KernelSpec, cfg: GPSConfig,
    rng_key: tuple,
) -> NDArray:
    """Unclamped propensity tables at ``points`` (k, d) from a fit on ``train``."""
    M = train.M
    p = bundle_index(M).p
    h = kernel.bandwidth
    out = np.empty((points.shape[0], 2**M))
    for a, x in enumerate(points):
        try:
            lin = fit_marginals_local(train.X, train.T, x, kernel)
        except InsufficientLocalData:
            # no local support: fall back to independence at the sample frequencies
            out[a] = pmf_tables(train.T.mean(axis=0)[None, :], np.zeros((1, p)))[0]
            continue
        alpha = lin.alpha_hat
        r = np.zeros(p)
        if p > 0:
            des = build_local_design(train.X, train.T, x, kernel)
            if method == "NW":
                kw = des.kernel_weights
                r = (kw @ des.W) / kw.sum()
            else:
                rule = "theory_local_FO" if method == "FO" else "theory_local_PI"
                lam = lambda_value(rule, train.n, M, d=train.d, h=h, delta=cfg.delta)
                pen = design_penalty(des, lam, "I")
                if method == "FO":
                    box = bootstrap_box_local(lin, cfg.delta_alpha, cfg.bootstrap_B, substream(*rng_key, a))
                    r = fit_local_first_order(des, box, pen, SolverOptions()).a
                else:
                    r = fit_local_plugin(des, pen, SolverOptions()).a
        out[a] = pmf_tables(alpha[None, :], r[None, :])[0]
    return out


def _mnl_fit(train: CausalDataset, ridge: float, maxiter: int) -> tuple[NDArray, bool]:
    """Softmax regression over all ``2^M`` levels on ``(1, X)``; returns ``(coef, converged)``."""
    L = 2**train.M
    Z = np.hstack([np.ones((train.n, 1)), train.X])
    y = train.levels
    Yoh = np.zeros((train.n, L))
    Yoh[np.arange(train.n), y] = 1.0
    q = Z.shape[1]

    def f(beta):
        B = beta.reshape(q, L)
        S = Z @ B
        ls = log_softmax(S, axis=1)
        val = -np.sum(Yoh * ls) / train.n + 0.5 * ridge * beta @ beta
        grad = Z.T @ (np.exp(ls) - Yoh) / train.n + ridge * B
        return val, grad.ravel()

    res = minimize(f, np.zeros(q * L), jac=True, method="L-BFGS-B",
                   options=dict(maxiter=maxiter, gtol=1e-9))
    return res.x.reshape(q, L), bool(res.success)


def fit_gps(
    data: CausalDataset,
    method: GPSMethod,
    folds: NDArray,
    config: GPSConfig = GPSConfig(),
    rng_seed: int = 0,
    truth: Optional[Callable[[NDArray], NDArray]] = None,
) -> GPSModel:
    """Cross-fitted generalized propensity scores for every row and level.

    Predictions for rows in fold ``k`` use a model fitted on the other folds
    only. ``method="oracle"`` evaluates ``truth(X)`` (rows of level
    probabilities) instead of fitting. All values are clamped to
    ``[eps_prop, 1 - eps_prop]`` without renormalization.
    """
    folds = np.asarray(folds, dtype=np.int64)
    if folds.shape != (data.n,):
        raise ValueError("fold assignment must cover every row")
    if method not in ("FO", "plugin", "NW", "MNL", "oracle"):
        raise ValueError(f"unknown GPS method {method!r}")
    h = config.resolved_bandwidth(data.n, data.M, data.d)
    kernel = KernelSpec(config.kernel, h, data.d)
    L = 2**data.M
    E = np.empty((data.n, L))
    flags: List[str] = []
    for k in np.unique(folds):
        test = np.flatnonzero(folds == k)
        train = data.subset(np.flatnonzero(folds != k))
        Xt = data.X[test]
        if method == "oracle":
            if truth is None:
                raise ValueError("the oracle method needs the true propensity function")
            E[test] = truth(Xt)
        elif method == "MNL":
            B, ok = _mnl_fit(train, config.mnl_ridge, config.mnl_maxiter)
            if not ok:
                flags.append(f"fold {k}: MNL did not converge")
            E[test] = softmax(np.hstack([np.ones((test.size, 1)), Xt]) @ B, axis=1)
        else:
            if config.anchors is None:
                pts, inv = np.unique(Xt, axis=0, return_inverse=True)
                tab = _bahadur_tables(method, train, pts, kernel, config, (rng_seed, 7, int(k)))
                E[test] = tab[np.asarray(inv).reshape(-1)]
            else:
                if data.d != 1:
                    raise ValueError("anchor interpolation is implemented for scalar covariates")
                pts = np.asarray(config.anchors, dtype=float).reshape(-1, 1)
                tab = _bahadur_tables(method, train, pts, kernel, config, (rng_seed, 7, int(k)))
                E[test] = _interp_tables(pts[:, 0], tab, Xt[:, 0])
    norm_err = float(np.max(np.abs(E.sum(axis=1) - 1.0)))
    E = np.clip(E, config.eps_prop, 1.0 - config.eps_prop)
    return GPSModel(method, folds, E, config.eps_prop, h, norm_err, flags)


# ---------------------------------------------------------------------------
# Outcome models and AIPW
# ---------------------------------------------------------------------------


def _ols_by_level(train: CausalDataset, X_pred: NDArray, L: int) -> NDArray:
    """Per-level OLS of ``O`` on ``(1, X)``; pooled means for thin levels."""
    lv = train.levels
    Zp = np.hstack([np.ones((X_pred.shape[0], 1)), X_pred])
    out = np.empty((X_pred.shape[0], L))
    overall = float(train.O.mean())
    for h in range(L):
        rows = lv == h
        cnt = int(rows.sum())
        if cnt >= train.d + 2:
            Z = np.hstack([np.ones((cnt, 1)), train.X[rows]])
            beta = np.linalg.lstsq(Z, train.O[rows], rcond=None)[0]
            out[:, h] = Zp @ beta
        else:
            out[:, h] = float(train.O[rows].mean()) if cnt else overall
    return out


def outcome_predictions(
    data: CausalDataset,
    folds: NDArray,
    truth: Optional[Callable[[NDArray, NDArray], NDArray]] = None,
) -> NDArray[np.float64]:
    """Cross-fitted ``mu_hat[i, h]``; ``truth(levels, X)`` injects the true regression."""
    L = 2**data.M
    if truth is not None:
        return np.stack([truth(np.full(data.n, h), data.X) for h in range(L)], axis=1)
    mu = np.empty((data.n, L))
    for k in np.unique(folds):
        test = np.flatnonzero(folds == k)
        mu[test] = _ols_by_level(data.subset(np.flatnonzero(folds != k)), data.X[test], L)
    return mu


@dataclass
class ATEResult:
    """Effect estimates for contrasts ``(t, t_ref)`` given as level codes."""

    contrasts: List[tuple[int, int]]
    tau: NDArray[np.float64]
    variance: NDArray[np.float64]
    n: int
    level: float
    fold_tau: NDArray[np.float64]
    method: str = ""

    @property
    def se(self) -> NDArray[np.float64]:
        return np.sqrt(self.variance / self.n)

    @property
    def half_width(self) -> NDArray[np.float64]:
        return norm.ppf(1 - (1 - self.level) / 2) * self.se

    @property
    def ci(self) -> NDArray[np.float64]:
        return np.stack([self.tau - self.half_width, self.tau + self.half_width], axis=1)

    def covers(self, truth: ArrayLike) -> NDArray[np.bool_]:
        return np.abs(self.tau - np.asarray(truth, dtype=float)) <= self.half_width

    def to_csv(self, truth: Optional[ArrayLike] = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["level", "reference", "tau", "se", "ci_lo", "ci_hi"]
        if truth is not None:
            head += ["truth", "covered"]
            cov = self.covers(truth)
            truth = np.asarray(truth, dtype=float)
        w.writerow(head)
        for c, (t, t0) in enumerate(self.contrasts):
            row = [t, t0] + [f"{v:.10g}" for v in (self.tau[c], self.se[c], self.ci[c, 0], self.ci[c, 1])]
            if truth is not None:
                row += [f"{truth[c]:.10g}", int(cov[c])]
            w.writerow(row)
        return buf.getvalue()


def aipw_contributions(
    data: CausalDataset, e_hat: NDArray, mu_hat: NDArray, t: int, t_ref: int
) -> NDArray[np.float64]:
    """Per-row AIPW terms for the contrast of level ``t`` against ``t_ref``."""
    lv = data.levels
    O = data.O
    return (mu_hat[:, t] - mu_hat[:, t_ref]
            + (lv == t) / e_hat[:, t] * (O - mu_hat[:, t])
            - (lv == t_ref) / e_hat[:, t_ref] * (O - mu_hat[:, t_ref]))


def estimate_ate(
    data: CausalDataset,
    gps: GPSModel,
    contrasts: Optional[Sequence[tuple[int, int]]] = None,
    level: float = 0.95,
    mu_hat: Optional[NDArray] = None,
) -> ATEResult:
    """Cross-fitted AIPW with influence-function variance.

    ``contrasts`` default to every level against level 0. The outcome model
    is per-level OLS on the same folds as ``gps`` unless ``mu_hat`` is given.
    """
    L = 2**data.M
    if contrasts is None:
        contrasts = [(h, 0) for h in range(1, L)]
    counts = data.level_counts()
    for t, t0 in contrasts:
        for h in (t, t0):
            if not 0 <= h < L:
                raise CausalDataError(f"level {h} out of range for M={data.M}")
            if counts[h] == 0:
                raise CausalDataError(f"treatment level {h} ({all_outcomes(data.M)[h].tolist()}) never observed")
    folds = gps.folds
    if mu_hat is None:
        mu_hat = outcome_predictions(data, folds)
    ks = np.unique(folds)
    tau = np.empty(len(contrasts))
    var = np.empty(len(contrasts))
    fold_tau = np.empty((len(contrasts), ks.size))
    for c, (t, t0) in enumerate(contrasts):
        psi = aipw_contributions(data, gps.e_hat, mu_hat, t, t0)
        fold_tau[c] = [psi[folds == k].mean() for k in ks]
        tau[c] = fold_tau[c].mean()
        var[c] = float(np.mean((psi - tau[c]) ** 2))
    return ATEResult(list(map(tuple, contrasts)), tau, var, data.n, level, fold_tau, gps.method)


def true_efficiency_bound(dgp: CausalDGP, t: ArrayLike, t_ref: Optional[ArrayLike] = None) -> float:
    """``Var[tau(X)] + E[1/e_ref(X)] + E[1/e_t(X)]`` by exact summation over the covariate support.

    Outcome noise has unit variance in :class:`CausalDGP`.
    """
    xs = dgp.treatment.x_support
    if xs is None:
        raise ValueError("the efficiency bound needs a finite covariate support")
    x = np.asarray(xs, dtype=float)
    t = np.asarray(t)
    t_ref = np.zeros_like(t) if t_ref is None else np.asarray(t_ref)
    tau_x = dgp.mean_outcome(t, x) - dgp.mean_outcome(t_ref, x)
    e = dgp.propensity(x)
    return float(np.var(tau_x) + np.mean(1.0 / e[:, level_code(t_ref)]) + np.mean(1.0 / e[:, level_code(t)]))


def true_ates(dgp: CausalDGP, contrasts: Sequence[tuple[int, int]]) -> NDArray[np.float64]:
    outs = all_outcomes(dgp.M)
    return np.array([dgp.true_ate(outs[t], outs[t0]) for t, t0 in contrasts])


def cross_fit_folds(n: int, K: int = 5, rng_seed=0) -> NDArray[np.int64]:
    if K < 2:
        raise ValueError("cross-fitting needs K >= 2")
    return fold_assignment(n, K, rng_seed)
