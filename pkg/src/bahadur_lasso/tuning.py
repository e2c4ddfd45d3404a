"""Penalty weights, penalty-level rules, cross-validation and bandwidth rules."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import norm

from .bundles import make_rng

WEIGHT_FLOOR = 1e-8

LambdaKind = Literal[
    "theory_PI", "theory_FO", "theory_oracle",
    "theory_local_PI", "theory_local_FO", "theory_local_oracle",
    "cv",
]
THEORY_RULES = ("theory_PI", "theory_FO", "theory_oracle",
                "theory_local_PI", "theory_local_FO", "theory_local_oracle")


class WeightFloorWarning(UserWarning):
    """A feature column was (numerically) zero and its weight was floored."""


@dataclass(frozen=True)
class WeightScheme:
    """Scheme I uses feature RMS; scheme II divides features by ``1 + W'r``.

    For scheme II either pass the factors directly or supply
    ``reweight_iters`` pilot fits (see :func:`iterative_weights`).
    """

    kind: Literal["I", "II"] = "I"
    reweight_iters: int = 0
    r_reference: Optional[NDArray[np.float64]] = None

    def __post_init__(self) -> None:
        if self.kind not in ("I", "II"):
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        if self.kind == "II" and self.r_reference is None and self.reweight_iters < 1:
            raise ValueError("scheme II needs r_reference or reweight_iters >= 1")


def _floor(w: NDArray) -> NDArray:
    bad = ~(w > WEIGHT_FLOOR)
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} zero feature column(s); weight floored at {WEIGHT_FLOOR}",
                      WeightFloorWarning, stacklevel=3)
        w = np.where(bad, WEIGHT_FLOOR, w)
    return w


def weights(
    scheme: WeightScheme | str,
    W: ArrayLike,
    factors: Optional[ArrayLike] = None,
    obs_weights: Optional[ArrayLike] = None,
) -> NDArray[np.float64]:
    """Root mean square of each feature column, optionally factor-normalized.

    ``obs_weights`` defaults to ``1/n``; pass ``K_h(X_i - x)/n`` for
    kernel-weighted columns.
    """
    kind = scheme.kind if isinstance(scheme, WeightScheme) else scheme
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    k = np.full(n, 1.0 / n) if obs_weights is None else np.asarray(obs_weights, dtype=float)
    if kind == "II":
        if factors is None:
            raise ValueError("scheme II requires factors 1 + W_i'r")
        W = W / np.asarray(factors, dtype=float)[:, None]
    elif kind != "I":
        raise ValueError(f"unknown weight scheme {kind!r}")
    return _floor(np.sqrt(k @ (W * W)))


def local_weights(
    scheme: WeightScheme | str,
    W: ArrayLike,
    X: ArrayLike,
    x: ArrayLike,
    obs_weights: ArrayLike,
    factors: Optional[ArrayLike] = None,
    bandwidth: Optional[float] = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Level weights ``(p,)`` and slope weights ``(p, d)`` at anchor ``x``.

    ``obs_weights`` are ``K_h(X_i - x) / N``. Slope columns multiply features
    by ``X_ik - x_k``; if ``bandwidth`` is given they are divided by it.
    """
    W = np.asarray(W, dtype=float)
    X = np.asarray(X, dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    k = np.asarray(obs_weights, dtype=float)
    level = weights(scheme, W, factors, k)
    kind = scheme.kind if isinstance(scheme, WeightScheme) else scheme
    Wf = W / np.asarray(factors, dtype=float)[:, None] if kind == "II" else W
    dx = X - np.asarray(x, dtype=float).reshape(1, -1)
    if bandwidth is not None:
        dx = dx / bandwidth
    slope = np.sqrt(np.einsum("i,ip,id->pd", k, Wf * Wf, dx * dx))
    return level, _floor(slope)


def iterative_weights(
    W: ArrayLike,
    fit_fn: Callable[[NDArray], NDArray],
    reweight_iters: int = 2,
    obs_weights: Optional[ArrayLike] = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Feasible scheme-II weights by repeated reweighting.

    Starts from scheme I (heavier penalization when ``r`` is unknown), fits,
    and recomputes weights from the fitted factors ``1 + W_i' r_hat``.
    Returns the final weights and the last pilot estimate.
    """
    W = np.asarray(W, dtype=float)
    w = weights("I", W, obs_weights=obs_weights)
    r = np.zeros(W.shape[1])
    for _ in range(max(1, reweight_iters)):
        r = fit_fn(w)
        w = weights("II", W, factors=1.0 + W @ r, obs_weights=obs_weights)
    return w, r


# ---------------------------------------------------------------------------
# Penalty level
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaRule:
    kind: LambdaKind = "theory_FO"
    delta: float = 0.05
    folds: int = 5
    grid_points: int = 20
    grid_ratio: float = 1e-3

    def __post_init__(self) -> None:
        if self.kind not in THEORY_RULES + ("cv",):
            raise ValueError(f"unknown lambda rule {self.kind!r}")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.grid_points < 8:
            raise ValueError("cv grid needs at least 8 points")


def normal_quantile(prob: float) -> float:
    return float(norm.ppf(prob))


def lambda_value(rule: LambdaRule | str, N: int, M: int, p: Optional[int] = None,
                 d: int = 1, h: float = 1.0, delta: Optional[float] = None) -> float:
    """Closed-form penalty levels.

    Unconditional rules use ``Phi^{-1}(1 - delta/2p)/sqrt(N)`` plus a nuisance
    term (``M/sqrt(N)`` plug-in, ``sqrt(M/N)`` first-order, none for oracle).
    Localized rules use ``Phi^{-1}(1 - delta/(2p(d+1)))/sqrt(N h^d)`` plus
    ``M/sqrt(N h^d) + d M h^2`` (plug-in) or ``M/(N h^d) + M d^2 h^4``
    (first-order).
    """
    if isinstance(rule, str):
        rule = LambdaRule(rule)
    if rule.kind == "cv":
        raise ValueError("the cv rule has no closed form; use cross_validate_lambda")
    delta = rule.delta if delta is None else delta
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    p = 2**M - M - 1 if p is None else p
    if p <= 0:
        raise ValueError("p must be positive")
    if N <= 0 or M <= 0 or h <= 0 or d <= 0:
        raise ValueError("N, M, d and h must be positive")
    kind = rule.kind
    if kind.startswith("theory_local"):
        nh = N * h**d
        base = normal_quantile(1 - delta / (2 * p * (d + 1))) / math.sqrt(nh)
        if kind == "theory_local_PI":
            return base + M / math.sqrt(nh) + d * M * h**2
        if kind == "theory_local_FO":
            return base + M / nh + M * d**2 * h**4
        return base
    base = normal_quantile(1 - delta / (2 * p)) / math.sqrt(N)
    if kind == "theory_PI":
        return base + M / math.sqrt(N)
    if kind == "theory_FO":
        return base + math.sqrt(M / N)
    return base


def lambda_grid(lam_max: float, points: int = 20, ratio: float = 1e-3) -> NDArray[np.float64]:
    """Log-spaced grid from ``lam_max`` down to ``ratio * lam_max`` (descending)."""
    if lam_max <= 0:
        lam_max = 1e-6
    return np.geomspace(lam_max, lam_max * ratio, points)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CVResult:
    lam: float
    grid: NDArray[np.float64]
    scores: NDArray[np.float64]
    fold_scores: NDArray[np.float64]


def fold_assignment(n: int, folds: int, rng_seed) -> NDArray[np.int64]:
    """Balanced random fold labels ``0..folds-1``."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    labels = np.arange(n) % folds
    return make_rng(rng_seed).permutation(labels)


def cross_validate_lambda(
    fit_fn: Callable[[NDArray, NDArray, float], tuple[NDArray, NDArray] | NDArray],
    n: int,
    grid: Sequence[float],
    folds: int = 5,
    rng_seed=0,
    feas_margin: float = 1e-8,
    assignment: Optional[NDArray] = None,
) -> CVResult:
    """K-fold held-out log-likelihood selection of lambda.

    ``fit_fn(train_idx, test_idx, lam)`` fits on ``train_idx`` and returns the
    held-out factors ``1 + W_i' r_hat`` for ``test_idx``, optionally paired with
    per-row weights. Factors below ``feas_margin`` score ``log(feas_margin)``.
    Grid points are visited from the largest lambda down so closures may warm
    start. Ties go to the larger lambda.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    order = np.argsort(-grid)
    labels = fold_assignment(n, folds, rng_seed) if assignment is None else np.asarray(assignment)
    floor = math.log(feas_margin)
    fold_scores = np.full((folds, grid.size), floor)
    for f in range(folds):
        test = np.flatnonzero(labels == f)
        train = np.flatnonzero(labels != f)
        for g in order:
            try:
                out = fit_fn(train, test, float(grid[g]))
            except (ValueError, FloatingPointError, np.linalg.LinAlgError):
                continue
            if isinstance(out, tuple):
                factors, wts = out
            else:
                factors, wts = out, np.ones(len(out))
            factors = np.asarray(factors, dtype=float)
            wts = np.asarray(wts, dtype=float)
            if factors.size == 0 or wts.sum() <= 0:
                fold_scores[f, g] = 0.0
                continue
            logs = np.where(factors > feas_margin, np.log(np.maximum(factors, feas_margin)), floor)
            fold_scores[f, g] = float(wts @ logs / wts.sum())
    scores = fold_scores.mean(axis=0)
    best = scores.max()
    tied = np.flatnonzero(scores >= best - 1e-12)
    pick = tied[np.argmax(grid[tied])]
    return CVResult(lam=float(grid[pick]), grid=grid, scores=scores, fold_scores=fold_scores)


# ---------------------------------------------------------------------------
# Bandwidth
# ---------------------------------------------------------------------------


def bandwidth_rule(rule: str, N: int, M: int, d: int = 1, constant: float = 1.0,
                   delta_N: Optional[float] = None) -> float:
    """``"log_p"``: ``(log p / N)^{1/(d+4)}``; ``"optimal"``: ``C (M^3 / (N delta_N))^{1/(4d)}``.

    ``delta_N`` defaults to ``1/log N`` for the optimal rule.
    """
    p = 2**M - M - 1
    if rule == "log_p":
        return constant * (math.log(p) / N) ** (1.0 / (d + 4))
    if rule == "optimal":
        dn = 1.0 / math.log(N) if delta_N is None else delta_N
        return constant * (M**3 / (N * dn)) ** (1.0 / (4 * d))
    raise ValueError(f"unknown bandwidth rule {rule!r}")
