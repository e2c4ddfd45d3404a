"""Weighted-L1 penalized log-likelihood maximization.

All estimators share one problem shape::

    maximize_theta  min_v  sum_i k_i log(eta_vi(theta))  -  sum_q lam_w[q] |theta_q|

where ``v`` ranges over a finite set of pieces (adversarial vertices or
candidate marginals) and ``eta_vi`` is affine in ``theta``. The plug-in
estimator has a single piece. For first-order estimators the pieces come from
a box and the linearized feature of observation ``i`` at vertex ``v`` is

    A_i + sum_j D_j[o_j(v), i] * B_ij

with ``o_j(v)`` the corner chosen for nuisance coordinate ``j``; values for
all vertices are assembled by broadcasting over per-coordinate choices, never
by materializing a (vertex, observation, feature) tensor.

The inner minimum is handled by soft-min smoothing with a decreasing
temperature; the softmax weights give a convex combination of piece gradients,
which is a valid supergradient of the min-function at the limit. Once the
temperature is small, an active-set Newton step solves the nonsmooth
optimality system exactly and certifies it (an LP certifies the zero
solution), which avoids the slow tail of the smoothing continuation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linprog, nnls
from scipy.special import logsumexp

from .bundles import bundle_index, gradient_w_alpha, make_rng, w_vector
from .marginals import AdversarialBox

logger = logging.getLogger(__name__)

MAX_VERTEX_M = 12
MAX_VERTICES = 2**20


class VertexGuardError(ValueError):
    """Vertex enumeration would exceed the configured guard."""


@dataclass(frozen=True)
class PenaltySpec:
    """``lam * sum_k w_k |r_k|``."""

    lam: float
    weights: NDArray[np.float64]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ValueError("lambda must be a nonnegative finite number")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("penalty weights must be strictly positive and finite")
        object.__setattr__(self, "weights", w)

    @property
    def lam_w(self) -> NDArray[np.float64]:
        return self.lam * self.weights

    def value(self, r: NDArray) -> float:
        return float(self.lam * np.sum(self.weights * np.abs(r)))


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 20000
    abs_tol: float = 1e-8
    rel_tol: float = 1e-12
    backtrack: float = 0.5
    init_step: float = 1.0
    feas_margin: float = 1e-8
    tau_schedule: Sequence[float] = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    polish_below: float = 1e-3

    def __post_init__(self) -> None:
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if self.init_step <= 0 or self.feas_margin < 0:
            raise ValueError("invalid step or margin")


@dataclass
class FitResult:
    """Output of a penalized fit."""

    r_hat: NDArray[np.float64]
    objective: float
    iterations: int
    converged: bool
    min_factor: float
    kkt_residual: float
    active_vertex: Optional[int] = None
    active_alpha: Optional[NDArray[np.float64]] = None
    heuristic: bool = False
    n_pieces: int = 1
    history: List[float] = field(default_factory=list, repr=False)
    message: str = ""


def soft_threshold(x: NDArray, t: NDArray) -> NDArray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def kkt_residual(theta: NDArray, grad: NDArray, lam_w: NDArray) -> float:
    """Max violation of the optimality conditions of the penalized problem."""
    nz = theta != 0
    res = np.where(
        nz,
        np.abs(grad - lam_w * np.sign(theta)),
        np.maximum(np.abs(grad) - lam_w, 0.0),
    )
    return float(res.max()) if res.size else 0.0


# ---------------------------------------------------------------------------
# Piece families
# ---------------------------------------------------------------------------


class _Pieces:
    """Interface: evaluate eta for all pieces and map piece weights to a gradient."""

    n_pieces: int
    q: int

    def eta(self, theta: NDArray) -> NDArray:  # (V, n)
        raise NotImplementedError

    def grad(self, rho: NDArray) -> NDArray:  # rho (V, n) -> (q,)
        raise NotImplementedError

    def features(self, idx: NDArray) -> NDArray:  # -> (len(idx), n, q)
        raise NotImplementedError

    def zero_gradients(self, k: NDArray) -> tuple[NDArray, List[NDArray]]:
        """Piece gradients at ``theta = 0`` as ``g0 + sum_j c_j[o_j]``."""
        raise NotImplementedError


class SeparablePieces(_Pieces):
    """Pieces indexed by per-coordinate corner choices.

    Parameters
    ----------
    A : (n, q) base features.
    B : (n, M, q) per-coordinate feature derivatives (may have M = 0).
    D : list of M arrays of shape (C_j, n) or (C_j, 1): offsets per choice.
    """

    def __init__(self, A: NDArray, B: Optional[NDArray] = None, D: Optional[List[NDArray]] = None):
        self.A = np.asarray(A, dtype=float)
        n, q = self.A.shape
        D = [] if D is None else [np.asarray(Dj, dtype=float) for Dj in D]
        # drop coordinates whose choices coincide: they contribute a constant
        # offset (absorbed into A) and no vertex multiplicity
        if D:
            A_adj = self.A.copy()
            keep_B, keep_D = [], []
            for j, Dj in enumerate(D):
                Dj = np.broadcast_to(Dj, (Dj.shape[0], n)) if Dj.shape[1] == 1 else Dj
                if np.all(Dj == Dj[0]):
                    if np.any(Dj[0] != 0):
                        A_adj = A_adj + Dj[0][:, None] * B[:, j, :]
                    continue
                keep_B.append(B[:, j, :])
                # keep original choice order for vertex labelling
                keep_D.append(Dj)
            self.A = A_adj
            self.B = np.stack(keep_B, axis=1) if keep_B else np.zeros((n, 0, q))
            self.D = keep_D
        else:
            self.B = np.zeros((n, 0, q))
            self.D = []
        self.n, self.q = n, q
        self.choices = [Dj.shape[0] for Dj in self.D]
        self.n_pieces = int(np.prod(self.choices)) if self.choices else 1
        if self.n_pieces > MAX_VERTICES:
            raise VertexGuardError(f"{self.n_pieces} vertices exceed guard {MAX_VERTICES}")
        # coordinate j lives on axis (m - 1 - j) so flat index has coord 0 fastest
        m = len(self.D)
        self._shape = tuple(reversed(self.choices))
        self._axes = [m - 1 - j for j in range(m)]

    def eta(self, theta: NDArray) -> NDArray:
        base = 1.0 + self.A @ theta
        if not self.D:
            return base[None, :]
        c = np.einsum("nmq,q->nm", self.B, theta)
        total = base.reshape((1,) * len(self.D) + (self.n,))
        for j, Dj in enumerate(self.D):
            shape = [1] * len(self.D) + [self.n]
            shape[self._axes[j]] = Dj.shape[0]
            total = total + (Dj * c[:, j]).reshape(shape)
        return total.reshape(self.n_pieces, self.n)

    def grad(self, rho: NDArray) -> NDArray:
        a = rho.sum(axis=0)
        g = self.A.T @ a
        if self.D:
            r = rho.reshape(self._shape + (self.n,))
            m = len(self.D)
            b = np.empty((self.n, m))
            for j, Dj in enumerate(self.D):
                other = tuple(ax for ax in range(m) if ax != self._axes[j])
                Rj = r.sum(axis=other) if other else r
                b[:, j] = np.sum(Dj * Rj, axis=0)
            g = g + np.einsum("nmq,nm->q", self.B, b)
        return g

    def features(self, idx: NDArray) -> NDArray:
        idx = np.atleast_1d(idx)
        X = np.broadcast_to(self.A, (idx.size, self.n, self.q)).copy()
        if self.D:
            pos = np.unravel_index(idx, self._shape)
            for j, Dj in enumerate(self.D):
                X += Dj[pos[self._axes[j]]][:, :, None] * self.B[None, :, j, :]
        return X

    def zero_gradients(self, k: NDArray) -> tuple[NDArray, List[NDArray]]:
        g0 = self.A.T @ k
        return g0, [np.einsum("on,n,nq->oq", Dj, k, self.B[:, j, :]) for j, Dj in enumerate(self.D)]


class ExplicitPieces(_Pieces):
    """Pieces given as a stacked feature array ``X`` of shape (V, n, q)."""

    def __init__(self, X: NDArray):
        self.X = np.asarray(X, dtype=float)
        self.n_pieces, self.n, self.q = self.X.shape

    def eta(self, theta: NDArray) -> NDArray:
        return 1.0 + self.X @ theta

    def grad(self, rho: NDArray) -> NDArray:
        return np.einsum("vn,vnq->q", rho, self.X)

    def features(self, idx: NDArray) -> NDArray:
        return self.X[np.atleast_1d(idx)]

    def zero_gradients(self, k: NDArray) -> tuple[NDArray, List[NDArray]]:
        return np.zeros(self.q), [np.einsum("vnq,n->vq", self.X, k)]


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class _Objective:
    def __init__(self, pieces: _Pieces, obs_weights: NDArray, margin: float):
        self.pieces = pieces
        self.k = obs_weights
        self.margin = margin

    def piece_values(self, theta: NDArray) -> Optional[NDArray]:
        eta = self.pieces.eta(theta)
        if eta.min() <= self.margin:
            return None
        return np.log(eta) @ self.k, eta

    def evaluate(self, theta: NDArray, tau: float):
        out = self.piece_values(theta)
        if out is None:
            return None
        F, eta = out
        if F.shape[0] == 1:
            mu = np.ones(1)
            Fs = float(F[0])
        else:
            z = -F / tau
            lse = logsumexp(z)
            Fs = float(-tau * lse)
            mu = np.exp(z - lse)
        rho = mu[:, None] * (self.k[None, :] / eta)
        g = self.pieces.grad(rho)
        return Fs, g, F, eta


def _zero_certificate(pieces: _Pieces, k: NDArray, lam_w: NDArray) -> Optional[float]:
    """Smallest KKT violation of ``theta = 0`` over all supergradients.

    At zero every piece ties, so the superdifferential is the convex hull of
    all piece gradients; for separable pieces it is a Minkowski sum of
    per-coordinate hulls and the LP stays small.
    """
    g0, parts = pieces.zero_gradients(k)
    q = g0.size
    if not parts:
        return float(np.max(np.maximum(np.abs(g0) - lam_w, 0.0), initial=0.0))
    G = np.hstack([c.T for c in parts])  # (q, sum C_j)
    m = G.shape[1]
    ones = np.ones((q, 1))
    A_ub = np.vstack([np.hstack([G, -ones]), np.hstack([-G, -ones])])
    b_ub = np.concatenate([lam_w - g0, lam_w + g0])
    A_eq = np.zeros((len(parts), m + 1))
    col = 0
    for j, c in enumerate(parts):
        A_eq[j, col:col + c.shape[0]] = 1.0
        col += c.shape[0]
    cost = np.zeros(m + 1)
    cost[-1] = 1.0
    out = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.ones(len(parts)),
                  bounds=[(0, None)] * (m + 1), method="highs")
    return float(out.x[-1]) if out.status == 0 else None


def _projection(m: int) -> NDArray:
    """Fixed random direction used to hash rows when deduplicating pieces."""
    return np.random.default_rng(20240607).standard_normal(m)


def _polish(
    pieces: _Pieces,
    k: NDArray,
    lam_w: NDArray,
    theta: NDArray,
    F: NDArray,
    mu: NDArray,
    tau: float,
    margin: float,
    max_candidates: int = 512,
    max_steps: int = 200,
) -> Optional[tuple[NDArray, NDArray]]:
    """Active-set Newton solve of the nonsmooth optimality system.

    Starting from a smoothed solution, guesses the support ``S`` and the tied
    pieces ``A`` and solves ``sum_a mu_a grad_S F_a = lam_w_S sign``,
    ``F_a = t``, ``sum mu = 1``. Steps are truncated where a tie weight or a
    support coefficient would change sign (that index leaves its set), and
    pieces or coordinates violating optimality are added once the reduced
    system is solved. Returns ``(theta, supergradient)`` or ``None``.
    """
    S = [int(j) for j in np.flatnonzero(theta)]
    if not S:
        return None
    sign = {j: float(np.sign(theta[j])) for j in S}
    cand = np.flatnonzero(F - F.min() <= 20 * tau)
    if cand.size > max_candidates:
        cand = cand[np.argsort(F[cand])[:max_candidates]]
    X = pieces.features(cand)
    eta = 1.0 + X @ theta
    key = np.concatenate([eta, X[:, :, S].reshape(len(cand), -1)], axis=1)
    _, first = np.unique(np.round(key @ _projection(key.shape[1]), 9), return_index=True)
    G = np.einsum("an,ans->as", k[None, :] / eta[first], X[first][:, :, S])
    sgn = np.array([sign[j] for j in S])
    rows = np.vstack([G.T, 10.0 * np.ones((1, len(first)))])
    w0, _ = nnls(rows, np.concatenate([lam_w[S] * sgn, [10.0]]))
    keep = np.flatnonzero(w0 > 1e-12)
    if keep.size == 0:
        return None
    active = [int(cand[first[i]]) for i in keep]
    mu_a = w0[keep] / w0[keep].sum()
    theta = theta.copy()
    Xa = pieces.features(np.array(active))
    t = float(mu_a @ (np.log(1.0 + Xa @ theta) @ k))
    seen: set = set()

    for _ in range(max_steps):
        Sa = np.array(S, dtype=int)
        sg = np.array([sign[j] for j in S])
        eta_a = 1.0 + Xa @ theta
        if eta_a.min() <= margin:
            return None
        Fa = np.log(eta_a) @ k
        Ga = np.einsum("an,anq->aq", k[None, :] / eta_a, Xa)
        R = np.concatenate([mu_a @ Ga[:, Sa] - lam_w[Sa] * sg, Fa - t, [mu_a.sum() - 1.0]])
        if np.max(np.abs(R)) <= 1e-12:
            # reduced system solved: check the conditions it does not encode
            eta_all = pieces.eta(theta)
            if eta_all.min() <= margin:
                return None
            F_all = np.log(eta_all) @ k
            worst = int(np.argmin(F_all))
            g = mu_a @ Ga
            off = np.array([j for j in range(theta.size) if j not in sign], dtype=int)
            viol = np.abs(g[off]) - lam_w[off] if off.size else np.zeros(0)
            state = (tuple(sorted(S)), tuple(sorted(active)))
            if F_all[worst] < t - 1e-11 * max(1.0, abs(t)) and worst not in active:
                active.append(worst)
                mu_a = np.append(mu_a, 0.0)
                Xa = pieces.features(np.array(active))
            elif viol.size and viol.max() > 1e-10:
                j = int(off[int(np.argmax(viol))])
                S.append(j)
                sign[j] = float(np.sign(g[j]))
            else:
                return theta, g
            if state in seen:
                return None
            seen.add(state)
            continue
        s_, a_ = Sa.size, len(active)
        XS = Xa[:, :, Sa]
        H = -np.einsum("a,an,ans,anr->sr", mu_a, k[None, :] / eta_a**2, XS, XS)
        J = np.zeros((s_ + a_ + 1, s_ + a_ + 1))
        J[:s_, :s_] = H
        J[:s_, s_:s_ + a_] = Ga[:, Sa].T
        J[s_:s_ + a_, :s_] = Ga[:, Sa]
        J[s_:s_ + a_, -1] = -1.0
        J[-1, s_:s_ + a_] = 1.0
        step = np.linalg.lstsq(J, -R, rcond=None)[0]
        d_th, d_mu, d_t = step[:s_], step[s_:s_ + a_], step[-1]
        # ratio test: first index to cross zero leaves its set
        alpha, block = 1.0, None
        for i in range(a_):
            if d_mu[i] < 0 and mu_a[i] + d_mu[i] < 0:
                a_i = -mu_a[i] / d_mu[i]
                if a_i < alpha:
                    alpha, block = a_i, ("piece", i)
        cur = theta[Sa] * sg
        dcur = d_th * sg
        for i in range(s_):
            if dcur[i] < 0 and cur[i] + dcur[i] < 0:
                a_i = -cur[i] / dcur[i]
                if a_i < alpha:
                    alpha, block = a_i, ("coef", i)
        while True:
            th_new = theta.copy()
            th_new[Sa] += alpha * d_th
            if (1.0 + Xa @ th_new).min() > margin and pieces.eta(th_new).min() > margin:
                break
            alpha *= 0.5
            block = None
            if alpha < 1e-12:
                return None
        theta, mu_a, t = th_new, mu_a + alpha * d_mu, t + alpha * d_t
        if block is not None:
            kind, i = block
            if kind == "piece":
                active.pop(i)
                mu_a = np.maximum(np.delete(mu_a, i), 0.0)
                if not active:
                    return None
                Xa = pieces.features(np.array(active))
            else:
                j = S.pop(i)
                theta[j] = 0.0
                del sign[j]
                if not S:
                    return None
    return None


def _solve(
    pieces: _Pieces,
    obs_weights: NDArray,
    lam_w: NDArray,
    opts: SolverOptions,
    theta0: Optional[NDArray] = None,
) -> FitResult:
    q = pieces.q
    lam_w = np.asarray(lam_w, dtype=float)
    if lam_w.shape != (q,):
        raise ValueError(f"penalty has length {lam_w.shape}, expected {q}")
    k = np.asarray(obs_weights, dtype=float)
    obj = _Objective(pieces, k, opts.feas_margin)
    theta = np.zeros(q) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    multi = pieces.n_pieces > 1
    taus = list(opts.tau_schedule) if multi else [1.0]
    state = obj.evaluate(theta, taus[0])
    if state is None:
        raise ValueError("starting point is infeasible")
    history: List[float] = []
    iters = 0
    t = opts.init_step
    converged = False
    kkt = np.inf
    polished = None
    if multi and not np.any(theta):
        viol = _zero_certificate(pieces, k, lam_w)
        if viol is not None and viol <= opts.abs_tol:
            polished = (theta, viol)
    for stage, tau in enumerate(taus):
        if polished is not None:
            break
        last = stage == len(taus) - 1
        tol = opts.abs_tol if last else max(opts.abs_tol, 10 * tau)
        state = obj.evaluate(theta, tau)
        Fs, g, F, eta = state
        phi = Fs - float(lam_w @ np.abs(theta))
        history.append(phi)
        kkt = kkt_residual(theta, g, lam_w)
        stalled = False
        while kkt > tol and iters < opts.max_iters:
            iters += 1
            while True:
                cand = soft_threshold(theta + t * g, t * lam_w)
                new = obj.evaluate(cand, tau)
                if new is not None:
                    d = cand - theta
                    if new[0] >= Fs + g @ d - (d @ d) / (2 * t) - 1e-15 * max(1.0, abs(Fs)):
                        break
                t *= opts.backtrack
                if t < 1e-20:
                    new = None
                    break
            if new is None:
                stalled = True
                break
            s = cand - theta
            y = new[1] - g
            theta = cand
            Fs, g, F, eta = new
            phi_new = Fs - float(lam_w @ np.abs(theta))
            history.append(phi_new)
            kkt = kkt_residual(theta, g, lam_w)
            if np.max(np.abs(s)) <= opts.rel_tol * max(1.0, np.max(np.abs(theta))):
                stalled = True
                break
            sy = float(s @ y)
            t = float(s @ s) / (-sy) if sy < 0 else t * 2.0
            t = min(max(t, 1e-12), 1e12)
        if multi and tau <= opts.polish_below:
            if not np.any(theta):
                viol = _zero_certificate(pieces, k, lam_w)
                if viol is not None and viol <= opts.abs_tol:
                    polished = (theta, viol)
            else:
                z = -F / tau
                mu = np.exp(z - logsumexp(z))
                out = _polish(pieces, k, lam_w, theta, F, mu, tau, opts.feas_margin)
                if out is not None:
                    res_kkt = kkt_residual(out[0], out[1], lam_w)
                    if res_kkt <= opts.abs_tol:
                        polished = (out[0], res_kkt)
        if last and polished is None:
            converged = kkt <= opts.abs_tol or (stalled and kkt <= 10 * opts.abs_tol)
    if polished is not None:
        theta, kkt = polished
        converged = True
        F, eta = obj.piece_values(theta)
        history.append(float(F.min()) - float(lam_w @ np.abs(theta)))
    true_F = float(F.min())
    active = int(np.argmin(F))
    objective = true_F - float(lam_w @ np.abs(theta))
    return FitResult(
        r_hat=theta,
        objective=objective,
        iterations=iters,
        converged=bool(converged),
        min_factor=float(eta.min()),
        kkt_residual=float(kkt),
        active_vertex=active if multi else None,
        n_pieces=pieces.n_pieces,
        history=history,
        message="" if converged else f"stopped with KKT residual {kkt:.3g} after {iters} iterations",
    )


def _uniform_weights(n: int) -> NDArray:
    return np.full(n, 1.0 / n)


# ---------------------------------------------------------------------------
# Objectives (for evaluation at fixed r)
# ---------------------------------------------------------------------------


def loglik(W: ArrayLike, r: ArrayLike, obs_weights: Optional[NDArray] = None) -> float:
    """``sum_i k_i log(1 + W_i' r)`` (``k_i = 1/n`` by default); ``-inf`` if infeasible."""
    W = np.asarray(W, dtype=float)
    f = 1.0 + W @ np.asarray(r, dtype=float)
    if f.min() <= 0:
        return -np.inf
    k = _uniform_weights(W.shape[0]) if obs_weights is None else obs_weights
    return float(np.log(f) @ k)


def plugin_objective(W: ArrayLike, r: ArrayLike, penalty: PenaltySpec) -> float:
    return loglik(W, r) - penalty.value(np.asarray(r))


def first_order_pieces(
    W_hat: NDArray, grad_W: NDArray, alpha_hat: NDArray, box: AdversarialBox
) -> SeparablePieces:
    """Linearized feature family over the 2^M vertices of an unconditional box."""
    M = box.M
    if M > MAX_VERTEX_M:
        raise VertexGuardError(f"M={M} exceeds vertex enumeration guard {MAX_VERTEX_M}")
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    B = np.transpose(grad_W, (0, 2, 1))
    D = [np.array([[box.level_lo[j] - alpha_hat[j]], [box.level_hi[j] - alpha_hat[j]]]) for j in range(M)]
    return SeparablePieces(W_hat, B, D)


def first_order_objective(
    W_hat: NDArray, grad_W: NDArray, alpha_hat: NDArray, box: AdversarialBox, r: ArrayLike, penalty: PenaltySpec
) -> float:
    """Exact min over box vertices of the linearized log-likelihood, minus penalty."""
    pieces = first_order_pieces(W_hat, grad_W, alpha_hat, box)
    eta = pieces.eta(np.asarray(r, dtype=float))
    if eta.min() <= 0:
        return -np.inf
    F = np.log(eta).mean(axis=1)
    return float(F.min()) - penalty.value(np.asarray(r))


def candidate_alphas(
    box: AdversarialBox, n_random: int = 64, rng_seed=0
) -> NDArray[np.float64]:
    """Box vertices followed by ``n_random`` uniform interior points (deduplicated)."""
    verts = box.level_vertices()
    if n_random > 0:
        rng = make_rng(rng_seed)
        u = rng.uniform(size=(n_random, box.M))
        inner = box.level_lo + u * (box.level_hi - box.level_lo)
        verts = np.vstack([verts, inner])
    _, keep = np.unique(verts, axis=0, return_index=True)
    return verts[np.sort(keep)]


def adversarial_objective(Y: NDArray, candidates: NDArray, r: ArrayLike, penalty: PenaltySpec) -> float:
    """Min over candidate marginals of the exact log-likelihood, minus penalty."""
    r = np.asarray(r, dtype=float)
    vals = [loglik(w_vector(Y, a), r) for a in candidates]
    return float(min(vals)) - penalty.value(r)


# ---------------------------------------------------------------------------
# Public estimators
# ---------------------------------------------------------------------------


def lambda_max(W: ArrayLike, weights: ArrayLike, obs_weights: Optional[NDArray] = None) -> float:
    """Smallest lambda for which ``r = 0`` is optimal for the plug-in problem."""
    W = np.asarray(W, dtype=float)
    k = _uniform_weights(W.shape[0]) if obs_weights is None else obs_weights
    g = W.T @ k
    return float(np.max(np.abs(g) / np.asarray(weights, dtype=float)))


def fit_plugin(
    W: ArrayLike,
    penalty: PenaltySpec,
    opts: SolverOptions = SolverOptions(),
    obs_weights: Optional[NDArray] = None,
    theta0: Optional[NDArray] = None,
) -> FitResult:
    """Penalized plug-in estimator: ``max_r (1/n) sum log(1 + W_i' r) - lam ||r||_{1,w}``.

    ``theta0`` warm-starts the solver (for example along a lambda path).
    """
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise ValueError("W must be a 2-d feature matrix")
    k = _uniform_weights(W.shape[0]) if obs_weights is None else np.asarray(obs_weights, dtype=float)
    return _solve(SeparablePieces(W), k, penalty.lam_w, opts, theta0=theta0)


def fit_first_order(
    W_hat: ArrayLike,
    grad_W: ArrayLike,
    alpha_hat: ArrayLike,
    box: AdversarialBox,
    penalty: PenaltySpec,
    opts: SolverOptions = SolverOptions(),
    theta0: Optional[NDArray] = None,
) -> FitResult:
    """First-order adversarial estimator with exact vertex inner minimization."""
    W_hat = np.asarray(W_hat, dtype=float)
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    if box.conditional:
        raise ValueError("use the localized estimator for conditional boxes")
    if not box.contains_level(alpha_hat, tol=1e-12):
        raise ValueError("alpha_hat must lie in the box")
    pieces = first_order_pieces(W_hat, np.asarray(grad_W, dtype=float), alpha_hat, box)
    res = _solve(pieces, _uniform_weights(W_hat.shape[0]), penalty.lam_w, opts, theta0=theta0)
    if res.active_vertex is not None:
        res.active_alpha = _vertex_alpha(pieces, box, alpha_hat, res.active_vertex)
    else:
        res.active_alpha = alpha_hat.copy()
    return res


def _vertex_alpha(pieces: SeparablePieces, box: AdversarialBox, alpha_hat: NDArray, flat: int) -> NDArray:
    # recover which coordinates were kept (non-degenerate) and their choices
    alpha = alpha_hat.copy()
    kept = [j for j in range(box.M) if box.level_lo[j] != box.level_hi[j]]
    idx = np.unravel_index(flat, pieces._shape) if pieces.choices else ()
    for pos, j in enumerate(kept):
        choice = idx[len(kept) - 1 - pos]
        alpha[j] = box.level_hi[j] if choice == 1 else box.level_lo[j]
    return alpha


def fit_adversarial_approx(
    Y: ArrayLike,
    alpha_hat: ArrayLike,
    box: AdversarialBox,
    penalty: PenaltySpec,
    opts: SolverOptions = SolverOptions(),
    n_random: int = 64,
    rng_seed=0,
) -> FitResult:
    """Heuristic adversarial estimator with the exact nonlinear feature map.

    The inner minimum over the box is approximated by the minimum over its
    vertices plus ``n_random`` seeded interior points.
    """
    Y = np.asarray(Y, dtype=float)
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    if box.is_point():
        cands = alpha_hat[None, :]
    else:
        cands = candidate_alphas(box, n_random, rng_seed)
    index = bundle_index(Y.shape[1])
    X = np.stack([w_vector(Y, a, index) for a in cands])
    pieces = ExplicitPieces(X) if X.shape[0] > 1 else SeparablePieces(X[0])
    res = _solve(pieces, _uniform_weights(Y.shape[0]), penalty.lam_w, opts)
    res.heuristic = True
    res.active_alpha = cands[res.active_vertex or 0]
    return res


def features_unconditional(Y: ArrayLike, alpha: ArrayLike) -> tuple[NDArray, NDArray]:
    """``W(alpha, Y_i)`` and ``grad_alpha W(alpha, Y_i)`` for all rows."""
    return w_vector(Y, alpha), gradient_w_alpha(Y, alpha)
