"""Simulation data-generating processes.

Three families are provided: a fixed unconditional joint model, a
covariate-dependent model with logistic marginals and linear coefficient
functions, and a multi-treatment causal design with linear outcome models.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bundles import JointModel, all_outcomes, bundle_index, make_rng, pmf_tables, validate_K

# Support positions are 1-based bundle positions in canonical order.
UNCONDITIONAL_SETUPS = {
    2: dict(alpha=(0.613, 0.491, 0.653, 0.510),
            r={8: -0.339, 11: 0.249}),
    5: dict(alpha=(0.767, 0.360, 0.389, 0.535),
            r={2: -0.009, 5: 0.160, 6: -0.011, 9: 0.031, 11: -0.066}),
}
CONDITIONAL_SUPPORTS = {0: (), 2: (2, 11), 5: (2, 5, 6, 9, 11), 10: (1, 2, 3, 4, 5, 6, 7, 8, 9, 10)}
# The 0.03 scale gives an invalid pmf for every 10-element support, so s=10 uses 0.02.
CONDITIONAL_COEF = {0: 0.03, 2: 0.03, 5: 0.03, 10: 0.02}
CONDITIONAL_THETA = (0.1, 0.2, 0.3, 0.4)
CAUSAL_X_SUPPORT = tuple(np.round(np.arange(1, 10) / 10, 1))


class DGPError(ValueError):
    """Generated parameters do not define a valid distribution."""


def _sample_rows(probs: NDArray, rng: np.random.Generator) -> NDArray[np.int64]:
    """Inverse-CDF draw of one outcome code per row of ``probs``."""
    probs = np.clip(probs, 0.0, None)
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(probs.shape[0])
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)


@dataclass(frozen=True)
class UnconditionalDGP:
    """Fixed ``(alpha, r)``; optionally redraw the marginals for every replication."""

    alpha: NDArray[np.float64]
    r: NDArray[np.float64]
    redraw_marginals: bool = False
    marginal_range: tuple[float, float] = (0.3, 0.8)

    @classmethod
    def setup(cls, s: int, **kw) -> "UnconditionalDGP":
        if s not in UNCONDITIONAL_SETUPS:
            raise DGPError(f"no unconditional setup with s={s}; choose from {sorted(UNCONDITIONAL_SETUPS)}")
        spec = UNCONDITIONAL_SETUPS[s]
        alpha = np.array(spec["alpha"])
        r = np.zeros(bundle_index(alpha.size).p)
        for pos, val in spec["r"].items():
            r[pos - 1] = val
        return cls(alpha, r, **kw)

    @property
    def M(self) -> int:
        return len(self.alpha)

    def model(self, rng: Optional[np.random.Generator] = None) -> JointModel:
        alpha = self.alpha
        if self.redraw_marginals:
            if rng is None:
                raise ValueError("redrawn marginals need a generator")
            lo, hi = self.marginal_range
            alpha = rng.uniform(lo, hi, size=self.M)
        rep = validate_K(alpha, self.r)
        if not rep.valid:
            raise DGPError(f"invalid model: factor {rep.min_value:.4g} at y={rep.argmin.tolist()}")
        return JointModel(np.asarray(alpha, dtype=float), self.r)

    def draw(self, n: int, seed) -> tuple[JointModel, NDArray[np.int8]]:
        rng = make_rng(seed)
        model = self.model(rng)
        return model, model.sample(n, rng)


@dataclass(frozen=True)
class ConditionalDGP:
    """``alpha_j(x) = 1/(1 + exp(theta_j x))`` and ``r_l(x) = (-1)^l c l x`` on the support.

    ``x_support`` switches the covariate from ``U[0, 1]`` to a uniform draw
    over the given points.
    """

    theta: tuple[float, ...] = CONDITIONAL_THETA
    support: tuple[int, ...] = CONDITIONAL_SUPPORTS[2]
    coef: float = 0.03
    x_support: Optional[tuple[float, ...]] = None

    @classmethod
    def setup(cls, s: int, **kw) -> "ConditionalDGP":
        if s not in CONDITIONAL_SUPPORTS:
            raise DGPError(f"no conditional setup with s={s}; choose from {sorted(CONDITIONAL_SUPPORTS)}")
        kw.setdefault("coef", CONDITIONAL_COEF[s])
        return cls(support=CONDITIONAL_SUPPORTS[s], **kw)

    @property
    def M(self) -> int:
        return len(self.theta)

    @property
    def p(self) -> int:
        return bundle_index(self.M).p

    def alpha(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        return 1.0 / (1.0 + np.exp(x * np.asarray(self.theta)[None, :]))

    def alpha_slope(self, x: ArrayLike) -> NDArray[np.float64]:
        a = self.alpha(x)
        return -a * (1 - a) * np.asarray(self.theta)[None, :]

    def slope(self) -> NDArray[np.float64]:
        """Constant derivative ``dr/dx`` (length p)."""
        b = np.zeros(self.p)
        for pos in self.support:
            b[pos - 1] = (-1) ** pos * self.coef * pos
        return b

    def r(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        return x * self.slope()[None, :]

    def pmf(self, x: ArrayLike) -> NDArray[np.float64]:
        """Conditional pmf tables, shape (len(x), 2^M)."""
        return pmf_tables(self.alpha(x), self.r(x))

    def sample_x(self, n: int, rng: np.random.Generator) -> NDArray[np.float64]:
        if self.x_support is None:
            return rng.random(n)
        return np.asarray(self.x_support)[rng.integers(0, len(self.x_support), size=n)]

    def sample_y(self, X: ArrayLike, rng: np.random.Generator) -> NDArray[np.int8]:
        P = self.pmf(X)
        if P.size and P.min() < -1e-12:
            raise DGPError(f"invalid conditional pmf: minimum {P.min():.4g}")
        return all_outcomes(self.M)[_sample_rows(P, rng)]

    def draw(self, n: int, seed) -> tuple[NDArray[np.float64], NDArray[np.int8]]:
        rng = make_rng(seed)
        X = self.sample_x(n, rng)
        return X, self.sample_y(X, rng)


def level_code(t: ArrayLike) -> NDArray[np.int64] | int:
    """``H(t) = sum_j t_j 2^(j-1)``."""
    t = np.asarray(t)
    h = t @ (1 << np.arange(t.shape[-1]))
    return int(h) if np.ndim(h) == 0 else h.astype(np.int64)


@dataclass(frozen=True)
class CausalDGP:
    """Treatments from a :class:`ConditionalDGP` on a 9-point covariate grid.

    Outcomes follow ``O = beta_t + mu_t X + eps`` with
    ``beta_t = 0.1 H(t)``, ``mu_t = 0.5 + 0.1 H(t)`` and standard normal noise.
    """

    s: int = 0
    treatment: ConditionalDGP = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.treatment is None:
            object.__setattr__(self, "treatment", ConditionalDGP.setup(self.s, x_support=CAUSAL_X_SUPPORT))

    @property
    def M(self) -> int:
        return self.treatment.M

    def propensity(self, x: ArrayLike) -> NDArray[np.float64]:
        """True ``e_t(x)`` for all levels (columns indexed by ``H(t)``)."""
        return self.treatment.pmf(x)

    def mean_outcome(self, t: ArrayLike, x: ArrayLike) -> NDArray[np.float64]:
        h = np.asarray(level_code(t), dtype=float)
        return 0.1 * h + (0.5 + 0.1 * h) * np.asarray(x, dtype=float)

    def true_ate(self, t: ArrayLike, t_ref: Optional[ArrayLike] = None) -> float:
        x = np.asarray(CAUSAL_X_SUPPORT)
        t_ref = np.zeros(self.M, dtype=int) if t_ref is None else t_ref
        return float(np.mean(self.mean_outcome(t, x) - self.mean_outcome(t_ref, x)))

    def draw(self, n: int, seed) -> tuple[NDArray[np.float64], NDArray[np.int8], NDArray[np.float64]]:
        """Returns ``(O, T, X)``."""
        rng = make_rng(seed)
        X = self.treatment.sample_x(n, rng)
        T = self.treatment.sample_y(X, rng)
        O = self.mean_outcome(T, X) + rng.standard_normal(n)
        return O, T, X


def levels(M: int) -> NDArray[np.int8]:
    """All treatment levels ordered by ``H(t)``."""
    return all_outcomes(M)


def check_supports(supports: Sequence[int] = (0, 2, 5, 10)) -> dict[int, float]:
    """Minimum pmf over a fine x grid for each conditional support (diagnostic)."""
    xs = np.linspace(0, 1, 101)
    return {s: float(ConditionalDGP.setup(s).pmf(xs).min()) for s in supports}
