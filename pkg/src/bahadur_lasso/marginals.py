"""Marginal probability estimators and multiplier-bootstrap adversarial boxes."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bundles import make_rng

EPS_TRUNC = 1e-3
DEFAULT_B = 1000
MAX_COND = 1e10


class InsufficientLocalData(ValueError):
    """Local design at the anchor is too thin or ill-conditioned."""


class BootstrapWarning(UserWarning):
    """Too few bootstrap draws for a reliable quantile."""


def truncate(alpha: ArrayLike, eps: float = EPS_TRUNC) -> NDArray[np.float64]:
    return np.clip(np.asarray(alpha, dtype=float), eps, 1.0 - eps)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


@dataclass(frozen=True)
class KernelSpec:
    """Compactly supported radial kernel on the unit ball, scaled by ``h``.

    ``floor-shifted-quadratic`` is proportional to ``1 - |u|^2 / 2`` on the
    ball, so it stays bounded below by half its peak on the support.
    """

    kind: Literal["floor-shifted-quadratic", "uniform-ball"] = "floor-shifted-quadratic"
    bandwidth: float = 0.5
    dimension: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("floor-shifted-quadratic", "uniform-ball"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.dimension < 1:
            raise ValueError("dimension must be positive")

    @property
    def normalizer(self) -> float:
        d = self.dimension
        vol = _ball_volume(d)
        if self.kind == "uniform-ball":
            return 1.0 / vol
        # E|U|^2 = d / (d + 2) for U uniform on the unit ball
        return 1.0 / (vol * (1.0 - 0.5 * d / (d + 2)))

    def profile(self, u: ArrayLike) -> NDArray[np.float64]:
        """K(u) for ``u`` of shape (..., d)."""
        u = np.asarray(u, dtype=float)
        sq = np.sum(u * u, axis=-1)
        inside = sq <= 1.0
        if self.kind == "uniform-ball":
            val = np.ones_like(sq)
        else:
            val = 1.0 - 0.5 * sq
        return np.where(inside, self.normalizer * val, 0.0)

    def weights(self, X: ArrayLike, x: ArrayLike) -> NDArray[np.float64]:
        """K_h(X_i - x) = K((X_i - x) / h) / h^d."""
        X = _as_design(X)
        u = (X - np.asarray(x, dtype=float).reshape(1, -1)) / self.bandwidth
        return self.profile(u) / self.bandwidth**self.dimension


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdversarialBox:
    """Hyperrectangle of nuisance marginals (and slopes, when conditional)."""

    level_lo: NDArray[np.float64]
    level_hi: NDArray[np.float64]
    slope_lo: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 0)))
    slope_hi: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 0)))
    cv: float = 0.0
    anchor: Optional[NDArray[np.float64]] = None
    degenerate: bool = False

    def __post_init__(self) -> None:
        if np.any(self.level_lo > self.level_hi) or np.any(self.slope_lo > self.slope_hi):
            raise ValueError("box lower bounds exceed upper bounds")

    @property
    def M(self) -> int:
        return self.level_lo.shape[0]

    @property
    def conditional(self) -> bool:
        return self.slope_lo.size > 0

    @property
    def d(self) -> int:
        return self.slope_lo.shape[1] if self.conditional else 0

    @property
    def n_vertices(self) -> int:
        return 2 ** (self.M * (1 + self.d))

    def contains_level(self, alpha: ArrayLike, tol: float = 0.0) -> bool:
        alpha = np.asarray(alpha, dtype=float)
        return bool(np.all(alpha >= self.level_lo - tol) and np.all(alpha <= self.level_hi + tol))

    def contains(self, alpha: ArrayLike, beta: Optional[ArrayLike] = None, tol: float = 0.0) -> bool:
        ok = self.contains_level(alpha, tol)
        if beta is not None and self.conditional:
            beta = np.asarray(beta, dtype=float).reshape(self.slope_lo.shape)
            ok = ok and bool(np.all(beta >= self.slope_lo - tol) and np.all(beta <= self.slope_hi + tol))
        return ok

    def level_vertices(self) -> NDArray[np.float64]:
        """All ``2^M`` corner points of the level box, shape (2^M, M).

        Vertex ``k`` takes the upper bound in coordinate ``j`` iff bit ``j``
        of ``k`` is set.
        """
        M = self.M
        bits = (np.arange(2**M)[:, None] >> np.arange(M)) & 1
        return np.where(bits == 1, self.level_hi, self.level_lo)

    def coordinate_choices(self) -> NDArray[np.float64]:
        """Per-coordinate corner options, shape (M, 2^(1+d), 1+d).

        Each option is a (level, slope_1..slope_d) corner for one nuisance
        coordinate; the box vertex set is the product of these.
        """
        M, d = self.M, self.d
        out = np.empty((M, 2 ** (1 + d), 1 + d))
        for j in range(M):
            lo = np.concatenate([[self.level_lo[j]], self.slope_lo[j] if d else []])
            hi = np.concatenate([[self.level_hi[j]], self.slope_hi[j] if d else []])
            for c, bits in enumerate(itertools.product((0, 1), repeat=1 + d)):
                out[j, c] = np.where(np.array(bits[::-1]) == 1, hi, lo)
        return out

    def is_point(self) -> bool:
        same = np.all(self.level_lo == self.level_hi)
        if self.conditional:
            same = same and np.all(self.slope_lo == self.slope_hi)
        return bool(same)

    @classmethod
    def point(cls, alpha: ArrayLike, beta: Optional[ArrayLike] = None, anchor=None) -> "AdversarialBox":
        alpha = np.asarray(alpha, dtype=float)
        if beta is None:
            return cls(alpha.copy(), alpha.copy())
        beta = np.asarray(beta, dtype=float)
        return cls(alpha.copy(), alpha.copy(), beta.copy(), beta.copy(), anchor=anchor)


def _quantile_of_max(stat: NDArray, delta_alpha: float) -> float:
    return float(np.quantile(stat, 1.0 - delta_alpha))


def _check_bootstrap(B: int, delta_alpha: float) -> None:
    if not 0.0 < delta_alpha < 1.0 and delta_alpha != 1.0:
        raise ValueError("delta_alpha must lie in (0, 1]")
    if B < 100:
        warnings.warn(f"B={B} bootstrap draws; quantile unreliable below 100", BootstrapWarning, stacklevel=3)


def multiplier_draws(n: int, B: int, rng_seed) -> NDArray[np.float64]:
    """``(B, n)`` i.i.d. standard normal multipliers."""
    return make_rng(rng_seed).standard_normal((B, n))


# ---------------------------------------------------------------------------
# Unconditional
# ---------------------------------------------------------------------------


def fit_marginals_unconditional(Y: ArrayLike, eps: float = EPS_TRUNC) -> NDArray[np.float64]:
    """Column means of ``Y``, truncated into ``[eps, 1 - eps]``."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[0] == 0:
        raise ValueError("empty data")
    return truncate(Y.mean(axis=0), eps)


def multiplier_statistic_unconditional(Y: ArrayLike, alpha_hat: ArrayLike, xi: NDArray) -> NDArray[np.float64]:
    """``max_j |(1/n) sum_i xi_bi (Y_ij - a_j) / s_j|`` for each draw ``b``."""
    Y = np.asarray(Y, dtype=float)
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    s = np.sqrt(alpha_hat * (1.0 - alpha_hat))
    scores = (Y - alpha_hat) / s
    return np.max(np.abs(xi @ scores), axis=1) / Y.shape[0]


def bootstrap_box_unconditional(
    Y: ArrayLike,
    alpha_hat: ArrayLike,
    delta_alpha: float = 0.05,
    B: int = DEFAULT_B,
    rng_seed=0,
    eps: float = EPS_TRUNC,
) -> AdversarialBox:
    """Box ``prod_j [a_j +- cv * s_j]`` with a multiplier-bootstrap critical value."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    if np.any(alpha_hat <= 0) or np.any(alpha_hat >= 1):
        raise ValueError("alpha_hat must be strictly interior")
    _check_bootstrap(B, delta_alpha)
    xi = multiplier_draws(Y.shape[0], B, rng_seed)
    stat = multiplier_statistic_unconditional(Y, alpha_hat, xi)
    cv = 0.0 if delta_alpha >= 1.0 else _quantile_of_max(stat, delta_alpha)
    s = np.sqrt(alpha_hat * (1.0 - alpha_hat))
    lo = np.clip(alpha_hat - cv * s, eps, 1 - eps)
    hi = np.clip(alpha_hat + cv * s, eps, 1 - eps)
    return AdversarialBox(np.minimum(lo, alpha_hat), np.maximum(hi, alpha_hat), cv=cv)


# ---------------------------------------------------------------------------
# Conditional (local linear)
# ---------------------------------------------------------------------------


@dataclass
class LocalLinearFit:
    """Per-outcome local-linear fit at an anchor point.

    ``leverage[i]`` is ``(Z'WZ / n)^{-1} Z_i K_h(X_i - x)`` so that
    ``theta_hat - theta = (1/n) sum_i leverage_i * eps_i`` to first order.
    """

    anchor: NDArray[np.float64]
    alpha_hat: NDArray[np.float64]
    alpha_raw: NDArray[np.float64]
    beta_tilde: NDArray[np.float64]
    residuals: NDArray[np.float64]
    leverage: NDArray[np.float64]
    kernel_weights: NDArray[np.float64]
    n: int

    @property
    def M(self) -> int:
        return self.alpha_hat.shape[0]

    @property
    def d(self) -> int:
        return self.beta_tilde.shape[1]

    @property
    def scale(self) -> NDArray[np.float64]:
        """``s_{j,l}(x) = sqrt((1/n) sum_i eps_ij^2 s_il^2)``, shape (M, 1+d)."""
        return np.sqrt((self.residuals**2).T @ (self.leverage**2) / self.n)

    def predict(self, X: ArrayLike) -> NDArray[np.float64]:
        """Affine extrapolation ``alpha_hat + beta (X - x)`` (untruncated)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.alpha_hat + (X - self.anchor) @ self.beta_tilde.T


def _as_design(X: ArrayLike) -> NDArray[np.float64]:
    X = np.asarray(X, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


def fit_marginals_local(
    X: ArrayLike,
    Y: ArrayLike,
    x: ArrayLike,
    kernel: KernelSpec,
    eps: float = EPS_TRUNC,
) -> LocalLinearFit:
    """Kernel-weighted least squares of each ``Y_j`` on ``(1, X - x)``.

    Levels are truncated into ``[eps, 1 - eps]``; slopes are left as fitted.
    """
    X = _as_design(X)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, d = X.shape
    x = np.asarray(x, dtype=float).reshape(d)
    k = kernel.weights(X, x)
    pos = k > 0
    if pos.sum() < d + 2:
        raise InsufficientLocalData(
            f"only {int(pos.sum())} observations with positive kernel weight at x={x.tolist()}; need {d + 2}"
        )
    Z = np.hstack([np.ones((n, 1)), X - x])
    gram = (Z[pos] * k[pos, None]).T @ Z[pos] / n
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > MAX_COND:
        raise InsufficientLocalData(
            f"local design at x={x.tolist()} is ill-conditioned (cond={cond:.3g}); widen the bandwidth"
        )
    gram_inv = np.linalg.inv(gram)
    coef = gram_inv @ ((Z * k[:, None]).T @ Y) / n
    resid = Y - Z @ coef
    resid[~pos] = 0.0
    leverage = (Z @ gram_inv) * k[:, None]
    alpha_raw = coef[0]
    return LocalLinearFit(
        anchor=x,
        alpha_hat=truncate(alpha_raw, eps),
        alpha_raw=alpha_raw,
        beta_tilde=coef[1:].T.copy(),
        residuals=resid,
        leverage=leverage,
        kernel_weights=k,
        n=n,
    )


def multiplier_statistic_local(fit: LocalLinearFit, xi: NDArray) -> NDArray[np.float64]:
    """``max_{j,l} |(1/n) sum_i xi_bi eps_ij s_il / s_{j,l}(x)|`` per draw."""
    scale = fit.scale
    terms = fit.residuals[:, :, None] * fit.leverage[:, None, :]  # (n, M, 1+d)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(scale > 0, terms / scale, 0.0)
    proj = xi @ terms.reshape(fit.n, -1) / fit.n
    return np.max(np.abs(proj), axis=1)


def bootstrap_box_local(
    fit: LocalLinearFit,
    delta_alpha: float = 0.05,
    B: int = DEFAULT_B,
    rng_seed=0,
    eps: float = EPS_TRUNC,
) -> AdversarialBox:
    """Box over (level, slope) coefficients of affine nuisance functions."""
    _check_bootstrap(B, delta_alpha)
    scale = fit.scale
    if not np.any(scale > 0):
        return AdversarialBox(
            fit.alpha_hat.copy(), fit.alpha_hat.copy(),
            fit.beta_tilde.copy(), fit.beta_tilde.copy(),
            cv=float("nan"), anchor=fit.anchor, degenerate=True,
        )
    xi = multiplier_draws(fit.n, B, rng_seed)
    stat = multiplier_statistic_local(fit, xi)
    cv = 0.0 if delta_alpha >= 1.0 else _quantile_of_max(stat, delta_alpha)
    a = fit.alpha_hat
    lo = np.minimum(np.clip(a - cv * scale[:, 0], eps, 1 - eps), a)
    hi = np.maximum(np.clip(a + cv * scale[:, 0], eps, 1 - eps), a)
    b = fit.beta_tilde
    return AdversarialBox(lo, hi, b - cv * scale[:, 1:], b + cv * scale[:, 1:], cv=cv, anchor=fit.anchor)
