"""Kernel-localized plug-in and first-order estimators with covariates.

At anchor ``x`` the coefficient function is approximated by
``r(X) = a + b (X - x)``. Internally the slope is solved as ``b_tilde = h b``
with regressors ``(X_i - x)/h`` so the bandwidth-scaled penalty
``sum w_k |a_k| + sum w_kj h |b_kj|`` becomes a plain weighted L1 norm.
Parameters are stacked as ``theta = [a (p), b_tilde (p*d, row-major)]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Literal, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bundles import bundle_index, gradient_w_alpha, w_vector
from .marginals import (
    EPS_TRUNC,
    AdversarialBox,
    InsufficientLocalData,
    KernelSpec,
    fit_marginals_local,
)
from .tuning import WeightScheme, local_weights
from .solver import (
    ExplicitPieces,
    FitResult,
    SeparablePieces,
    SolverOptions,
    VertexGuardError,
    _solve,
)

logger = logging.getLogger(__name__)

MAX_EXACT_VERTEX_BITS = 20


@dataclass(frozen=True)
class LocalPenaltySpec:
    """``lam * (sum_k w_k |a_k| + sum_kj w_kj h |b_kj|)``."""

    lam: float
    level_weights: NDArray[np.float64]
    slope_weights: NDArray[np.float64]

    def __post_init__(self) -> None:
        lw = np.asarray(self.level_weights, dtype=float)
        sw = np.asarray(self.slope_weights, dtype=float)
        if sw.ndim == 1:
            sw = sw.reshape(-1, 1)
        if self.lam < 0 or np.any(lw <= 0) or np.any(sw <= 0):
            raise ValueError("local penalty level and weights must be positive")
        if sw.shape[0] != lw.shape[0]:
            raise ValueError("slope weights must have one row per bundle")
        object.__setattr__(self, "level_weights", lw)
        object.__setattr__(self, "slope_weights", sw)

    @property
    def lam_w(self) -> NDArray[np.float64]:
        return self.lam * np.concatenate([self.level_weights, self.slope_weights.ravel()])


@dataclass
class LocalDesign:
    """Immutable inputs of a localized fit at one anchor.

    Only observations with positive kernel weight are stored.
    """

    anchor: NDArray[np.float64]
    kernel: KernelSpec
    n_total: int
    X: NDArray[np.float64]
    Y: NDArray[np.float64]
    kernel_weights: NDArray[np.float64]
    alpha_at_X: NDArray[np.float64]
    W: NDArray[np.float64]
    grad_W: NDArray[np.float64]

    @property
    def h(self) -> float:
        return self.kernel.bandwidth

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.W.shape[1]

    @property
    def scaled_dx(self) -> NDArray[np.float64]:
        return (self.X - self.anchor) / self.h

    @property
    def obs_weights(self) -> NDArray[np.float64]:
        """``K_h(X_i - x) / N`` for the stored rows."""
        return self.kernel_weights / self.n_total

    def features(self) -> NDArray[np.float64]:
        """``[W_i, W_i (x) (X_i - x)/h]`` of shape (n_local, p (1 + d))."""
        z = self.scaled_dx
        slope = (self.W[:, :, None] * z[:, None, :]).reshape(self.W.shape[0], -1)
        return np.hstack([self.W, slope])

    def feature_derivatives(self) -> NDArray[np.float64]:
        """``grad_alpha`` of the local features, shape (n_local, M, p (1 + d))."""
        z = self.scaled_dx
        G = np.transpose(self.grad_W, (0, 2, 1))  # (n, M, p)
        slope = (G[:, :, :, None] * z[:, None, None, :]).reshape(G.shape[0], G.shape[1], -1)
        return np.concatenate([G, slope], axis=2)


def local_marginals_at(
    X: ArrayLike,
    Y: ArrayLike,
    points: ArrayLike,
    kernel: KernelSpec,
    eps: float = EPS_TRUNC,
) -> NDArray[np.float64]:
    """Truncated local-linear marginal estimates evaluated at each row of ``points``.

    Duplicate points are fitted once.
    """
    X = np.asarray(X, dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    pts = np.asarray(points, dtype=float)
    pts = pts.reshape(-1, 1) if pts.ndim == 1 else pts
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    fits = np.stack([fit_marginals_local(X, Y, u, kernel, eps).alpha_hat for u in uniq])
    return fits[np.asarray(inv).ravel()]


def build_local_design(
    X: ArrayLike,
    Y: ArrayLike,
    x: ArrayLike,
    kernel: KernelSpec,
    alpha_at_X: Optional[ArrayLike] = None,
    alpha_fn: Optional[Callable[[NDArray], NDArray]] = None,
    eps: float = EPS_TRUNC,
    min_points: Optional[int] = None,
) -> LocalDesign:
    """Assemble the localized design at anchor ``x``.

    Marginal features come from ``alpha_at_X`` (per-row values), ``alpha_fn``
    (evaluated on in-bandwidth rows), or local-linear fits at each ``X_i``.
    """
    X = np.asarray(X, dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    Y = np.asarray(Y, dtype=float)
    n, d = X.shape
    x = np.asarray(x, dtype=float).reshape(d)
    k = kernel.weights(X, x)
    pos = np.flatnonzero(k > 0)
    need = (d + 2) if min_points is None else min_points
    if pos.size < need:
        raise InsufficientLocalData(f"{pos.size} in-bandwidth observations at x={x.tolist()}; need {need}")
    if alpha_at_X is not None:
        a = np.asarray(alpha_at_X, dtype=float)[pos]
    elif alpha_fn is not None:
        a = np.asarray(alpha_fn(X[pos]), dtype=float)
    else:
        a = local_marginals_at(X, Y, X[pos], kernel, eps)
    a = np.clip(a, eps, 1 - eps)
    index = bundle_index(Y.shape[1])
    return LocalDesign(
        anchor=x,
        kernel=kernel,
        n_total=n,
        X=X[pos],
        Y=Y[pos],
        kernel_weights=k[pos],
        alpha_at_X=a,
        W=w_vector(Y[pos], a, index),
        grad_W=gradient_w_alpha(Y[pos], a, index),
    )


@dataclass
class LocalFit:
    """Localized coefficient estimate ``r(X) ~ a + b (X - x)``."""

    anchor: NDArray[np.float64]
    bandwidth: float
    a: NDArray[np.float64]
    b: NDArray[np.float64]
    result: FitResult
    method: str = "plugin"
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.result.converged

    def predict_r(self, x_query: ArrayLike) -> NDArray[np.float64]:
        return predict_r(self, x_query)

    def to_row(self) -> list[float]:
        return [*self.anchor.tolist(), *self.a.tolist(), *self.b.ravel().tolist()]


def predict_r(fit: LocalFit, x_query: ArrayLike) -> NDArray[np.float64]:
    """``a + b (x_query - x)``."""
    dx = np.asarray(x_query, dtype=float).reshape(-1) - fit.anchor
    return fit.a + fit.b @ dx


def _unpack(theta: NDArray, p: int, d: int, h: float) -> tuple[NDArray, NDArray]:
    a = theta[:p].copy()
    b = theta[p:].reshape(p, d) / h
    return a, b


def design_penalty(
    design: LocalDesign,
    lam: float,
    scheme: WeightScheme | str = "I",
    factors: Optional[ArrayLike] = None,
    scaled_slopes: bool = False,
) -> LocalPenaltySpec:
    """Penalty with kernel-weighted level and slope weights computed from ``design``.

    Slope weights use raw ``X_i - x`` multipliers unless ``scaled_slopes``.
    """
    lw, sw = local_weights(scheme, design.W, design.X, design.anchor, design.obs_weights,
                           factors=factors, bandwidth=design.h if scaled_slopes else None)
    return LocalPenaltySpec(lam, lw, sw)


def local_objective(design: LocalDesign, a: ArrayLike, b: ArrayLike, penalty: LocalPenaltySpec) -> float:
    """Localized plug-in objective in the original ``(a, b)`` parameterization."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float).reshape(design.p, design.d)
    r_i = a[None, :] + (design.X - design.anchor) @ b.T
    f = 1.0 + np.sum(design.W * r_i, axis=1)
    if f.min() <= 0:
        return -np.inf
    pen = penalty.lam * (penalty.level_weights @ np.abs(a)
                         + np.sum(penalty.slope_weights * design.h * np.abs(b)))
    return float(design.obs_weights @ np.log(f)) - pen


def local_lambda_max(design: LocalDesign, penalty_weights: NDArray) -> float:
    """Smallest ``lam`` at which ``(a, b) = 0`` solves the localized plug-in problem."""
    g = design.features().T @ design.obs_weights
    return float(np.max(np.abs(g) / penalty_weights))


def fit_local_plugin(
    design: LocalDesign,
    penalty: LocalPenaltySpec,
    opts: SolverOptions = SolverOptions(),
    theta0: Optional[NDArray] = None,
) -> LocalFit:
    """Kernel-weighted penalized plug-in fit of ``(a, b)`` at the design anchor."""
    _check_penalty(design, penalty)
    res = _solve(SeparablePieces(design.features()), design.obs_weights, penalty.lam_w, opts, theta0=theta0)
    a, b = _unpack(res.r_hat, design.p, design.d, design.h)
    return LocalFit(design.anchor, design.h, a, b, res, method="plugin")


def _check_penalty(design: LocalDesign, penalty: LocalPenaltySpec) -> None:
    if penalty.level_weights.shape[0] != design.p or penalty.slope_weights.shape != (design.p, design.d):
        raise ValueError("penalty weights do not match the design dimensions")


def local_first_order_pieces(design: LocalDesign, box: AdversarialBox) -> SeparablePieces:
    """Linearized local features for every affine nuisance function at a box vertex."""
    if not box.conditional:
        raise ValueError("localized first-order fits need a conditional (level, slope) box")
    if box.d != design.d:
        raise ValueError("box slope dimension does not match the design")
    M = box.M
    choices = box.coordinate_choices()  # (M, C, 1 + d)
    dx = design.X - design.anchor  # (n, d)
    Zc = np.hstack([np.ones((dx.shape[0], 1)), dx])  # (n, 1 + d)
    D = [choices[j] @ Zc.T - design.alpha_at_X[:, j][None, :] for j in range(M)]
    return SeparablePieces(design.features(), design.feature_derivatives(), D)


def fit_local_first_order(
    design: LocalDesign,
    box: AdversarialBox,
    penalty: LocalPenaltySpec,
    opts: SolverOptions = SolverOptions(),
    inner: Literal["exact", "screening", "auto"] = "auto",
    max_rounds: int = 50,
    theta0: Optional[NDArray] = None,
) -> LocalFit:
    """Localized first-order adversarial fit.

    ``inner="exact"`` enumerates all ``2^{M(1+d)}`` vertices (guarded at
    ``2^20``). ``inner="screening"`` grows a working set of vertices found by
    coordinatewise local search at the current solution; it is a heuristic.
    ``"auto"`` picks exact when the guard allows it.
    """
    _check_penalty(design, penalty)
    bits = box.M * (1 + box.d)
    if inner == "auto":
        inner = "exact" if bits <= MAX_EXACT_VERTEX_BITS else "screening"
    if inner == "exact":
        if bits > MAX_EXACT_VERTEX_BITS:
            raise VertexGuardError(
                f"2^{bits} vertices exceed the exact guard 2^{MAX_EXACT_VERTEX_BITS}; use inner='screening'"
            )
        pieces = local_first_order_pieces(design, box)
        res = _solve(pieces, design.obs_weights, penalty.lam_w, opts, theta0=theta0)
        a, b = _unpack(res.r_hat, design.p, design.d, design.h)
        return LocalFit(design.anchor, design.h, a, b, res, method="first_order")
    return _fit_local_screening(design, box, penalty, opts, max_rounds)


def _vertex_features(design: LocalDesign, box: AdversarialBox, combo: tuple[int, ...]) -> NDArray:
    choices = box.coordinate_choices()
    dx = design.X - design.anchor
    Zc = np.hstack([np.ones((dx.shape[0], 1)), dx])
    delta = np.stack([Zc @ choices[j, c] for j, c in enumerate(combo)], axis=1) - design.alpha_at_X
    return design.features() + np.einsum("nmq,nm->nq", design.feature_derivatives(), delta)


def _fit_local_screening(design, box, penalty, opts, max_rounds) -> LocalFit:
    n_choice = 2 ** (1 + box.d)
    M = box.M
    k = design.obs_weights

    def value(combo, theta):
        f = 1.0 + _vertex_features(design, box, combo) @ theta
        return -np.inf if f.min() <= 0 else float(k @ np.log(f))

    working = [tuple(0 for _ in range(M))]
    theta = np.zeros(design.p * (1 + design.d))
    res = None
    for _ in range(max_rounds):
        X = np.stack([_vertex_features(design, box, c) for c in working])
        pieces = ExplicitPieces(X) if len(working) > 1 else SeparablePieces(X[0])
        res = _solve(pieces, k, penalty.lam_w, opts, theta0=theta)
        theta = res.r_hat
        current = min(value(c, theta) for c in working)
        # coordinatewise descent from the currently active vertex
        combo = list(working[res.active_vertex or 0])
        best = value(tuple(combo), theta)
        improved = True
        while improved:
            improved = False
            for j in range(M):
                for c in range(n_choice):
                    trial = combo.copy()
                    trial[j] = c
                    v = value(tuple(trial), theta)
                    if v < best - 1e-12:
                        best, combo, improved = v, trial, True
        if best >= current - opts.abs_tol or tuple(combo) in working:
            break
        working.append(tuple(combo))
    res.heuristic = True
    a, b = _unpack(theta, design.p, design.d, design.h)
    return LocalFit(design.anchor, design.h, a, b, res, method="first_order",
                    extra={"working_set": len(working)})
