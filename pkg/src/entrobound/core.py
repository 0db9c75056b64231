"""Exact entropy and mutual-information arithmetic on discrete joint distributions.

All entropies use the natural logarithm and are reported in nat.  The basic
building block is ``h_point(x) = -x*ln(x)`` with the continuity convention
``h_point(0) = 0``; joint and marginal entropies are plain sums of ``h_point``
over their entries.

Every value type here is immutable after construction and every operation is a
pure function, so they are safe to use from any number of concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Feasibility tolerance for mass / marginal checks.
TOL_FEAS = 1e-9
# Tolerance for derived inequalities (MI >= 0, entropy sandwich, ...).
TOL_NUM = 1e-8
# Denominator guard for the scaled MI ratio.
TOL_DENOM = 1e-10
# Below this, x*ln(x) underflows; treat as exactly 0 (continuity convention).
_H_FLOOR = 1e-300


class EntroboundError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(EntroboundError, ValueError):
    """An input violates a documented invariant (sign, mass, shape)."""


class MarginalMismatchError(EntroboundError):
    """A joint distribution does not reproduce the required marginals."""


class TrivialInstanceError(EntroboundError):
    """The entropy range degenerates and the scaled MI ratio is undefined."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MarginalPair:
    """Fixed row/column marginals (mu, nu) of one problem instance.

    Both vectors must be strictly positive and sum to one within ``TOL_FEAS``.
    Zero entries are excluded by the standing assumption: a zero marginal row
    or column forces the corresponding joint entries to zero and contributes
    nothing to the entropy, so it can always be stripped beforehand.
    """

    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _freeze(np.atleast_1d(self.mu)))
        object.__setattr__(self, "nu", _freeze(np.atleast_1d(self.nu)))
        for name, w in (("mu", self.mu), ("nu", self.nu)):
            if w.ndim != 1 or w.size == 0:
                raise ValidationError(f"{name} must be a non-empty vector")
            if np.any(w <= 0.0):
                raise ValidationError(f"{name} must be strictly positive")
            if abs(w.sum() - 1.0) > TOL_FEAS:
                raise ValidationError(
                    f"{name} must sum to 1 (got {w.sum():.12g})"
                )

    @property
    def n(self) -> int:
        return self.mu.size

    @property
    def m(self) -> int:
        return self.nu.size


@dataclass(frozen=True)
class JointDistribution:
    """A nonnegative n-by-m matrix with unit total mass.

    Entries in ``[-TOL_FEAS, 0)`` coming from floating-point arithmetic are
    clipped to zero on construction; anything more negative is rejected.
    """

    p: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.p, dtype=float))
        if p.ndim != 2 or p.size == 0:
            raise ValidationError("joint distribution must be a non-empty matrix")
        if np.any(p < -TOL_FEAS):
            raise ValidationError(
                f"joint distribution has negative entry {p.min():.3g}"
            )
        p = np.where(p < 0.0, 0.0, p)
        total = p.sum()
        if abs(total - 1.0) > TOL_FEAS:
            raise ValidationError(f"total mass must be 1 (got {total:.12g})")
        object.__setattr__(self, "p", _freeze(p))

    @property
    def shape(self) -> tuple[int, int]:
        return self.p.shape


def h_point(x: float) -> float:
    """Pointwise entropy term ``-x*ln(x)`` in nat, with ``h_point(0) = 0``.

    Continuous on ``[0, inf)``; raises :class:`ValidationError` for negative
    input.
    """
    if x < 0.0:
        raise ValidationError(f"h_point is undefined for negative x (got {x:.3g})")
    if x < _H_FLOOR:
        return 0.0
    return float(-x * np.log(x))


def _h_array(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    out = np.zeros_like(a)
    mask = a >= _H_FLOOR
    out[mask] = -a[mask] * np.log(a[mask])
    return out


def entropy(p: JointDistribution | np.ndarray) -> float:
    """Shannon entropy ``H(P)`` in nat of a joint distribution."""
    a = p.p if isinstance(p, JointDistribution) else np.asarray(p, dtype=float)
    if np.any(a < 0.0):
        raise ValidationError("entropy is undefined for negative entries")
    return float(_h_array(a).sum())


def marginal_entropy(w: np.ndarray) -> float:
    """Entropy in nat of a probability vector (nonnegative, unit mass)."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 0.0):
        raise ValidationError("marginal entropy is undefined for negative entries")
    if abs(w.sum() - 1.0) > TOL_FEAS:
        raise ValidationError(f"probability vector must sum to 1 (got {w.sum():.12g})")
    return float(_h_array(w).sum())


def marginals_of(p: JointDistribution) -> MarginalPair:
    """Row and column sums of a joint distribution as a :class:`MarginalPair`."""
    return MarginalPair(mu=p.p.sum(axis=1), nu=p.p.sum(axis=0))


def product_joint(marg: MarginalPair) -> JointDistribution:
    """Independence coupling ``P_ij = mu_i * nu_j`` of the marginals."""
    return JointDistribution(np.outer(marg.mu, marg.nu))


def mutual_information(
    p: JointDistribution, marg: MarginalPair, tol: float = TOL_FEAS
) -> float:
    """Mutual information ``H(mu) + H(nu) - H(P)`` in nat.

    ``p`` must reproduce ``marg`` within ``tol``; otherwise a
    :class:`MarginalMismatchError` is raised.
    """
    row = p.p.sum(axis=1)
    col = p.p.sum(axis=0)
    if row.size != marg.n or col.size != marg.m:
        raise MarginalMismatchError(
            f"shape mismatch: joint is {p.shape}, marginals are ({marg.n}, {marg.m})"
        )
    drow = float(np.max(np.abs(row - marg.mu)))
    dcol = float(np.max(np.abs(col - marg.nu)))
    if max(drow, dcol) > tol:
        raise MarginalMismatchError(
            f"joint does not match marginals (max deviation {max(drow, dcol):.3g})"
        )
    return marginal_entropy(marg.mu) + marginal_entropy(marg.nu) - entropy(p)


def mi_ratio(
    h_data: float,
    h_min: float,
    h_max: float,
    tol_num: float = TOL_NUM,
    tol_denom: float = TOL_DENOM,
) -> float:
    """Scaled MI ratio ``(h_data - h_max) / (h_min - h_max)``.

    Positions the observed entropy within the achievable entropy range for its
    marginals: 1 at the minimum-entropy end (maximal MI), 0 at the
    maximum-entropy end (zero MI).

    Raises :class:`TrivialInstanceError` when ``|h_min - h_max|`` is below
    ``tol_denom`` (singleton entropy range), and :class:`ValidationError` when
    ``h_data`` lies outside ``[h_min, h_max]`` by more than ``tol_num``.
    """
    denom = h_min - h_max
    if abs(denom) <= tol_denom:
        raise TrivialInstanceError(
            "entropy range is degenerate; the scaled MI ratio is undefined"
        )
    if h_data < h_min - tol_num or h_data > h_max + tol_num:
        raise ValidationError(
            f"h_data={h_data:.12g} outside [h_min, h_max]="
            f"[{h_min:.12g}, {h_max:.12g}] beyond tolerance"
        )
    return float((h_data - h_max) / denom)
