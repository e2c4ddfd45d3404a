"""Exact algebra of the Bahadur expansion for M-dimensional binary vectors.

A pmf over ``{0,1}^M`` factors as

    P(Y = y) = (1 + W(alpha, y)' r) * prod_j alpha_j^{y_j} (1 - alpha_j)^{1 - y_j}

where ``W_l`` is the product of standardized outcomes over bundle ``l``
(a subset of at least two coordinates) and ``r_l`` is the generalized
correlation coefficient of that bundle.

Conventions used throughout the package:

* coordinates are 0-based internally; bundles are printed 1-based;
* bundles are ordered by ascending cardinality, then lexicographically;
* outcome tables enumerate ``y`` by binary counting with coordinate 0 as the
  least significant bit, so outcome ``k`` has ``y_j = (k >> j) & 1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

MAX_ENUM_M = 25
BUNDLE_ORDER_TAG = "cardinality-lex"


class DomainError(ValueError):
    """Raised when marginals hit {0, 1} or inputs fall outside the model domain."""


class EnumerationGuardError(ValueError):
    """Raised when a 2^M enumeration would exceed the configured guard."""


@dataclass(frozen=True)
class BundleIndex:
    """Bijection between coefficient positions and outcome bundles.

    Parameters
    ----------
    M : int
        Number of binary outcomes.
    """

    M: int
    table: Tuple[Tuple[int, ...], ...] = field(init=False, repr=False)
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.M < 1:
            raise ValueError("M must be a positive integer")
        table = tuple(
            combo
            for k in range(2, self.M + 1)
            for combo in itertools.combinations(range(self.M), k)
        )
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "_lookup", {b: i for i, b in enumerate(table)})

    @property
    def p(self) -> int:
        return len(self.table)

    def subset_of(self, l: int) -> Tuple[int, ...]:
        return self.table[l]

    def index_of(self, subset: Sequence[int]) -> int:
        key = tuple(sorted(subset))
        try:
            return self._lookup[key]
        except KeyError:
            raise KeyError(f"{key} is not a bundle for M={self.M}") from None

    @property
    def membership(self) -> NDArray[np.bool_]:
        """(p, M) boolean incidence matrix."""
        return _membership(self.M)

    def labels(self) -> list[str]:
        """Human readable 1-based bundle names, e.g. ``"{1,2,4}"``."""
        return ["{" + ",".join(str(j + 1) for j in b) + "}" for b in self.table]

    def __len__(self) -> int:
        return self.p


@lru_cache(maxsize=None)
def bundle_index(M: int) -> BundleIndex:
    """Cached :class:`BundleIndex` for ``M`` outcomes."""
    return BundleIndex(M)


@lru_cache(maxsize=None)
def _membership(M: int) -> NDArray[np.bool_]:
    idx = bundle_index(M)
    mem = np.zeros((idx.p, M), dtype=bool)
    for l, b in enumerate(idx.table):
        mem[l, list(b)] = True
    mem.setflags(write=False)
    return mem


def all_outcomes(M: int, guard: int = MAX_ENUM_M) -> NDArray[np.int8]:
    """All ``2^M`` outcomes as a ``(2^M, M)`` 0/1 matrix in table order."""
    if M > guard:
        raise EnumerationGuardError(f"2^{M} enumeration exceeds guard M <= {guard}")
    k = np.arange(2**M, dtype=np.int64)
    return ((k[:, None] >> np.arange(M)) & 1).astype(np.int8)


def outcome_code(Y: ArrayLike) -> NDArray[np.int64]:
    """Map rows of a 0/1 matrix to their position in the outcome table."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.int64))
    return Y @ (1 << np.arange(Y.shape[1], dtype=np.int64))


def _check_alpha(alpha: NDArray) -> None:
    if not np.all(np.isfinite(alpha)):
        raise DomainError("marginal probabilities must be finite")
    if np.any(alpha <= 0.0) or np.any(alpha >= 1.0):
        raise DomainError("marginal probabilities must lie strictly inside (0, 1)")


def standardized_outcome(y: ArrayLike, alpha: ArrayLike) -> NDArray[np.float64]:
    """z_j = (y_j - alpha_j) / sqrt(alpha_j (1 - alpha_j)).

    Broadcasts: ``y`` may be ``(M,)`` or ``(n, M)``; ``alpha`` may be ``(M,)``
    or per-observation ``(n, M)``.
    """
    y = np.asarray(y, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    _check_alpha(alpha)
    if y.shape[-1] != alpha.shape[-1]:
        raise ValueError(f"dimension mismatch: y has {y.shape[-1]} coords, alpha {alpha.shape[-1]}")
    return (y - alpha) / np.sqrt(alpha * (1.0 - alpha))


def _bundle_products(z: NDArray, index: BundleIndex) -> NDArray:
    # Build products level by level: each bundle of size k extends a bundle of
    # size k-1 (its prefix) by its last coordinate.
    out = np.empty(z.shape[:-1] + (index.p,), dtype=float)
    for l, b in enumerate(index.table):
        if len(b) == 2:
            out[..., l] = z[..., b[0]] * z[..., b[1]]
        else:
            out[..., l] = out[..., index.index_of(b[:-1])] * z[..., b[-1]]
    return out


def w_vector(y: ArrayLike, alpha: ArrayLike, index: Optional[BundleIndex] = None) -> NDArray[np.float64]:
    """Bundle features W_l(alpha, y) = prod_{m in bundle l} z_m(y, alpha).

    Returns shape ``(p,)`` for a single outcome or ``(n, p)`` for a matrix.
    """
    z = standardized_outcome(y, alpha)
    if index is None:
        index = bundle_index(z.shape[-1])
    if index.M != z.shape[-1]:
        raise ValueError(f"dimension mismatch: index has M={index.M}, data has {z.shape[-1]}")
    return _bundle_products(z, index)


w_matrix = w_vector


def dz_dalpha(y: ArrayLike, alpha: ArrayLike) -> NDArray[np.float64]:
    """Elementwise derivative of z_j with respect to alpha_j."""
    alpha = np.asarray(alpha, dtype=float)
    z = standardized_outcome(y, alpha)
    s = np.sqrt(alpha * (1.0 - alpha))
    return -(1.0 + z * (1.0 - 2.0 * alpha) / (2.0 * s)) / s


def gradient_w_alpha(y: ArrayLike, alpha: ArrayLike, index: Optional[BundleIndex] = None) -> NDArray[np.float64]:
    """Jacobian of W with respect to alpha.

    Returns ``(p, M)`` for a single outcome, ``(n, p, M)`` for a matrix of
    outcomes. Entry ``(l, m)`` is zero unless ``m`` belongs to bundle ``l``.
    """
    z = standardized_outcome(y, alpha)
    dz = dz_dalpha(y, alpha)
    M = z.shape[-1]
    if index is None:
        index = bundle_index(M)
    if index.M != M:
        raise ValueError(f"dimension mismatch: index has M={index.M}, data has {M}")
    out = np.zeros(z.shape[:-1] + (index.p, M), dtype=float)
    for l, b in enumerate(index.table):
        for m in b:
            others = [k for k in b if k != m]
            prod = z[..., others[0]].copy()
            for k in others[1:]:
                prod = prod * z[..., k]
            out[..., l, m] = prod * dz[..., m]
    return out


def independence_pmf(y: ArrayLike, alpha: ArrayLike) -> NDArray[np.float64]:
    """prod_j alpha_j^{y_j} (1 - alpha_j)^{1 - y_j} (broadcasting as above)."""
    y = np.asarray(y, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    return np.prod(np.where(y > 0.5, alpha, 1.0 - alpha), axis=-1)


@dataclass(frozen=True)
class KReport:
    """Result of checking membership in the feasible set of (alpha, r)."""

    valid: bool
    min_value: float
    argmin: NDArray[np.int8]

    def __bool__(self) -> bool:
        return self.valid


@dataclass(frozen=True)
class JointModel:
    """A pmf over ``{0,1}^M`` given by marginals and bundle coefficients.

    ``pmf`` may return negative values when ``(alpha, r)`` is not in the
    feasible set; call :meth:`validate` to check.
    """

    alpha: NDArray[np.float64]
    r: NDArray[np.float64]
    index: BundleIndex = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=float).copy()
        r = np.asarray(self.r, dtype=float).copy()
        _check_alpha(alpha)
        index = self.index if self.index is not None else bundle_index(alpha.shape[0])
        if index.M != alpha.shape[0]:
            raise ValueError("index dimension does not match alpha")
        if r.shape != (index.p,):
            raise ValueError(f"r must have length p={index.p}, got shape {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("coefficients must be finite")
        alpha.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "index", index)

    @property
    def M(self) -> int:
        return self.index.M

    @property
    def p(self) -> int:
        return self.index.p

    def factor(self, y: ArrayLike) -> NDArray[np.float64]:
        """1 + W(alpha, y)' r."""
        return 1.0 + w_vector(y, self.alpha, self.index) @ self.r

    def pmf(self, y: ArrayLike) -> NDArray[np.float64] | float:
        val = self.factor(y) * independence_pmf(y, self.alpha)
        return float(val) if np.ndim(val) == 0 else val

    def pmf_table(self) -> NDArray[np.float64]:
        return np.asarray(self.pmf(all_outcomes(self.M)))

    def validate(self) -> KReport:
        return validate_K(self.alpha, self.r, self.index)

    def sample(self, n: int, rng_seed: int | np.random.Generator) -> NDArray[np.int8]:
        return sample(self, n, rng_seed)

    def support(self) -> NDArray[np.int64]:
        return np.flatnonzero(self.r != 0.0)

    def to_record(self) -> dict:
        return {
            "M": self.M,
            "alpha": [float(a) for a in self.alpha],
            "r": [float(v) for v in self.r],
            "bundle_order": BUNDLE_ORDER_TAG,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "JointModel":
        if rec.get("bundle_order", BUNDLE_ORDER_TAG) != BUNDLE_ORDER_TAG:
            raise ValueError(f"unsupported bundle order {rec['bundle_order']!r}")
        alpha = np.asarray(rec["alpha"], dtype=float)
        if int(rec["M"]) != alpha.shape[0]:
            raise ValueError("record M does not match alpha length")
        return cls(alpha, np.asarray(rec["r"], dtype=float))


def pmf(model: JointModel, y: ArrayLike):
    """Probability of outcome(s) ``y`` under ``model`` (no clamping)."""
    return model.pmf(y)


def validate_K(alpha: ArrayLike, r: ArrayLike, index: Optional[BundleIndex] = None) -> KReport:
    """Check ``min_y 1 + W(alpha, y)' r >= 0`` by enumerating all outcomes."""
    alpha = np.asarray(alpha, dtype=float)
    M = alpha.shape[0]
    if M > MAX_ENUM_M:
        raise EnumerationGuardError(f"2^{M} enumeration exceeds guard M <= {MAX_ENUM_M}")
    index = index or bundle_index(M)
    ys = all_outcomes(M)
    f = 1.0 + w_vector(ys, alpha, index) @ np.asarray(r, dtype=float)
    k = int(np.argmin(f))
    return KReport(valid=bool(f[k] >= 0.0), min_value=float(f[k]), argmin=ys[k])


def extract_r0(
    pmf_table: ArrayLike,
    index: Optional[BundleIndex] = None,
    atol: float = 1e-9,
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Recover (alpha, r) from a full pmf table in outcome-table order."""
    probs = np.asarray(pmf_table, dtype=float)
    n_out = probs.shape[0]
    M = int(round(np.log2(n_out)))
    if 2**M != n_out:
        raise ValueError(f"table length {n_out} is not a power of two")
    if M > MAX_ENUM_M:
        raise EnumerationGuardError(f"2^{M} enumeration exceeds guard M <= {MAX_ENUM_M}")
    if np.any(probs < -atol):
        raise ValueError("pmf table has negative entries")
    if abs(probs.sum() - 1.0) > atol:
        raise ValueError(f"pmf table sums to {probs.sum():.12g}, not 1")
    index = index or bundle_index(M)
    ys = all_outcomes(M)
    alpha = probs @ ys
    if np.any(alpha <= 0.0) or np.any(alpha >= 1.0):
        raise DomainError("implied marginal probabilities are degenerate")
    r = probs @ w_vector(ys, alpha, index)
    return alpha, r


def make_rng(seed: int | np.random.Generator) -> np.random.Generator:
    """Counter-based Philox generator; passes existing generators through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


RNG_ALGORITHM = "numpy.Philox"


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox stream identified by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def sample(model: JointModel, n: int, rng_seed: int | np.random.Generator) -> NDArray[np.int8]:
    """Draw ``n`` i.i.d. outcomes from ``model``; deterministic given the seed."""
    report = model.validate()
    if not report.valid:
        raise ValueError(
            f"model is not a valid pmf: factor {report.min_value:.4g} at y={report.argmin.tolist()}"
        )
    if n == 0:
        return np.zeros((0, model.M), dtype=np.int8)
    probs = np.clip(model.pmf_table(), 0.0, None)
    probs = probs / probs.sum()
    rng = make_rng(rng_seed)
    codes = rng.choice(probs.shape[0], size=n, p=probs)
    return all_outcomes(model.M)[codes]


def pmf_tables(alpha: NDArray, r: NDArray, index: Optional[BundleIndex] = None) -> NDArray[np.float64]:
    """Row-wise pmf tables for per-row parameters ``alpha (k, M)``, ``r (k, p)``."""
    alpha = np.atleast_2d(alpha)
    r = np.atleast_2d(r)
    M = alpha.shape[1]
    index = index or bundle_index(M)
    ys = all_outcomes(M)
    _check_alpha(alpha)
    z = (ys[None, :, :] - alpha[:, None, :]) / np.sqrt(alpha * (1 - alpha))[:, None, :]
    W = _bundle_products(z, index)
    base = np.prod(np.where(ys[None, :, :] > 0, alpha[:, None, :], 1 - alpha[:, None, :]), axis=-1)
    return (1.0 + np.einsum("kyp,kp->ky", W, r)) * base
