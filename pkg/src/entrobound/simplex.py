"""Bounded-variable revised simplex for equality-constrained LPs.

Solves ``min c'x  s.t.  A x = b,  lower <= x <= upper`` with a two-phase
primal simplex.  The basis is held as a dense LU factorization (scipy) plus a
product-form eta file, refactorized every ``REFACTOR_EVERY`` pivots or when
the recomputed primal residual drifts.

Design notes:

* Redundant equality rows are tolerated: phase 1 leaves their artificial
  columns basic at level zero with bounds pinned to ``[0, 0]``, which is
  equivalent to dropping the dependent rows.  Callers never need to
  pre-reduce the constraint matrix.
* Warm starts accept a basis/variable-status pair from a previous solve.  If
  the basis is primal infeasible under changed bounds (the branch-and-bound
  case) a bounded-variable dual simplex restores feasibility; any failure
  along the way falls back to a cold solve, never to a wrong answer.
* Pricing is most-negative reduced cost with a Bland's-rule fallback after a
  run of degenerate pivots, so the iteration is provably finite.
* All tie-breaks are by lowest index; solves are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .core import EntroboundError

TOL_FEAS = 1e-9
TOL_OPT = 1e-9
TOL_PIVOT = 1e-10
REFACTOR_EVERY = 50
DRIFT_TOL = 1e-7

NONBASIC_LOWER = 0
NONBASIC_UPPER = 1
BASIC = 2

_STALL_LIMIT = 200  # consecutive degenerate pivots before Bland's rule


class LpError(EntroboundError):
    """The solver could not certify a correct result."""


@dataclass(frozen=True)
class LpProblem:
    """``min c'x  s.t.  A x = b,  lower <= x <= upper``.

    ``A`` is stored in CSC form; lower bounds must be finite, upper bounds may
    be ``+inf``.
    """

    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        A = sp.csc_matrix(self.A, dtype=float)
        c = np.asarray(self.c, dtype=float).ravel()
        b = np.asarray(self.b, dtype=float).ravel()
        lo = np.asarray(self.lower, dtype=float).ravel()
        up = np.asarray(self.upper, dtype=float).ravel()
        n_rows, n_vars = A.shape
        if not (c.size == lo.size == up.size == n_vars) or b.size != n_rows:
            raise LpError("inconsistent LP dimensions")
        if np.any(np.isinf(lo)):
            raise LpError("lower bounds must be finite")
        if np.any(lo > up + 1e-15):
            raise LpError("lower bound exceeds upper bound")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def AT(self) -> sp.csr_matrix:
        """Cached transpose, shared by repeated solves on the same matrix."""
        cached = self.__dict__.get("_AT")
        if cached is None:
            cached = self.A.T.tocsr()
            object.__setattr__(self, "_AT", cached)
        return cached


@dataclass(frozen=True)
class LpSolution:
    """Solver result.

    ``basis`` and ``vstat`` use the augmented column numbering in which
    indices ``>= n_vars`` denote the solver's internal row artificials; they
    can be fed back into :func:`solve_lp` as a warm start for the same matrix
    (or a compatibly renumbered one).
    """

    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    obj: float | None
    basis: np.ndarray | None
    vstat: np.ndarray | None
    duals: np.ndarray | None
    iterations: int


@dataclass(frozen=True)
class WarmStart:
    basis: np.ndarray
    vstat: np.ndarray


def dump_problem(p: LpProblem) -> str:
    """Plain-text dump: one objective line, one line per constraint row, one
    line per variable bound.  Intended for external cross-checking."""
    lines = ["objective " + " ".join(f"{v:.17g}" for v in p.c)]
    A = p.A.tocsr()
    for i in range(p.n_rows):
        row = A.getrow(i)
        terms = " ".join(
            f"{j}:{v:.17g}" for j, v in zip(row.indices, row.data)
        )
        lines.append(f"row {i} {terms} = {p.b[i]:.17g}")
    for j in range(p.n_vars):
        lines.append(f"bound {j} {p.lower[j]:.17g} {p.upper[j]:.17g}")
    return "\n".join(lines) + "\n"


class _Basis:
    """LU factors of the current basis plus a product-form eta file."""

    def __init__(self, solver: "_Simplex"):
        self.solver = solver
        self.lu = None
        self.etas: list[tuple[int, np.ndarray]] = []

    def factorize(self, basis: np.ndarray) -> bool:
        B = self.solver.columns(basis)
        try:
            lu, piv = sla.lu_factor(B, check_finite=False)
        except (ValueError, sla.LinAlgError):
            return False
        diag = np.abs(np.diag(lu))
        scale = max(np.abs(B).max(), 1.0)
        if diag.size and diag.min() <= 1e-12 * scale:
            return False
        self.lu = (lu, piv)
        self.etas = []
        return True

    def ftran(self, rhs: np.ndarray) -> np.ndarray:
        w = sla.lu_solve(self.lu, rhs, check_finite=False)
        for r, alpha in self.etas:
            wr = w[r] / alpha[r]
            w -= alpha * wr
            w[r] = wr
        return w

    def btran(self, rhs: np.ndarray) -> np.ndarray:
        y = rhs.copy()
        for r, alpha in reversed(self.etas):
            y[r] = (y[r] - alpha @ y + alpha[r] * y[r]) / alpha[r]
        return sla.lu_solve(self.lu, y, trans=1, check_finite=False)

    def push_eta(self, r: int, alpha: np.ndarray) -> None:
        self.etas.append((r, alpha.copy()))

    @property
    def needs_refactor(self) -> bool:
        return len(self.etas) >= REFACTOR_EVERY


class _Simplex:
    """One solve on the augmented system [A | S] where S holds signed unit
    artificial columns, one per row."""

    def __init__(self, p: LpProblem, upper: np.ndarray | None = None):
        self.p = p
        self.m = p.n_rows
        self.n = p.n_vars
        self.total = self.n + self.m
        self.A = p.A
        self.AT = p.AT  # for fast A'y products in pricing
        self.art_sign = np.ones(self.m)
        struct_upper = p.upper if upper is None else upper
        self.lower = np.concatenate([p.lower, np.zeros(self.m)])
        self.upper = np.concatenate([struct_upper, np.full(self.m, np.inf)])
        self.cost = np.concatenate([p.c, np.zeros(self.m)])
        self.x = np.zeros(self.total)
        self.vstat = np.full(self.total, NONBASIC_LOWER, dtype=np.int8)
        self.basis = np.zeros(self.m, dtype=np.int64)
        self.in_basis_row = np.full(self.total, -1, dtype=np.int64)
        self.fac = _Basis(self)
        self.iterations = 0

    # -- column access -----------------------------------------------------

    def column(self, j: int) -> np.ndarray:
        col = np.zeros(self.m)
        if j < self.n:
            a = self.A
            lo, hi = a.indptr[j], a.indptr[j + 1]
            col[a.indices[lo:hi]] = a.data[lo:hi]
        else:
            col[j - self.n] = self.art_sign[j - self.n]
        return col

    def columns(self, idx: np.ndarray) -> np.ndarray:
        B = np.zeros((self.m, len(idx)))
        for k, j in enumerate(idx):
            B[:, k] = self.column(int(j))
        return B

    def products(self, y: np.ndarray) -> np.ndarray:
        """A_aug' y for all augmented columns."""
        out = np.empty(self.total)
        out[: self.n] = self.AT @ y
        out[self.n:] = self.art_sign * y
        return out

    def ax(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x[: self.n] + self.art_sign * x[self.n:]

    # -- state management ----------------------------------------------------

    def set_basis(self, basis: np.ndarray) -> bool:
        self.basis = basis.astype(np.int64).copy()
        self.in_basis_row.fill(-1)
        self.in_basis_row[self.basis] = np.arange(self.m)
        return self.fac.factorize(self.basis)

    def nonbasic_values(self) -> None:
        """Clamp every nonbasic variable to the bound recorded in vstat."""
        nb = self.vstat != BASIC
        bad = nb & (self.vstat == NONBASIC_UPPER) & ~np.isfinite(self.upper)
        self.vstat[bad] = NONBASIC_LOWER
        at_up = nb & (self.vstat == NONBASIC_UPPER)
        at_lo = nb & (self.vstat == NONBASIC_LOWER)
        self.x[at_up] = self.upper[at_up]
        self.x[at_lo] = self.lower[at_lo]

    def recompute_basics(self) -> None:
        rhs = self.p.b - self.ax(np.where(self.vstat == BASIC, 0.0, self.x))
        self.x[self.basis] = self.fac.ftran(rhs)

    def refactorize(self) -> None:
        if not self.fac.factorize(self.basis):
            raise LpError("numerically singular basis beyond repair")
        self.recompute_basics()

    def primal_residual(self) -> float:
        return float(np.max(np.abs(self.ax(self.x) - self.p.b), initial=0.0))

    def reduced_costs(self, cost: np.ndarray) -> np.ndarray:
        y = self.fac.btran(cost[self.basis])
        z = cost - self.products(y)
        z[self.basis] = 0.0
        return z

    # -- primal iteration ----------------------------------------------------

    def primal(self, cost: np.ndarray, max_iter: int) -> str:
        """Primal simplex loop; returns "optimal" or "unbounded"."""
        stall = 0
        fixed = self.upper - self.lower <= 1e-15
        while True:
            if self.fac.needs_refactor:
                self.refactorize()
            self.iterations += 1
            if self.iterations > max_iter:
                raise LpError("simplex iteration limit exceeded")
            z = self.reduced_costs(cost)
            cand_lo = (self.vstat == NONBASIC_LOWER) & (z < -TOL_OPT) & ~fixed
            cand_up = (self.vstat == NONBASIC_UPPER) & (z > TOL_OPT) & ~fixed
            cand = np.flatnonzero(cand_lo | cand_up)
            if cand.size == 0:
                return "optimal"
            if stall > _STALL_LIMIT:
                q = int(cand[0])  # Bland's rule
            else:
                q = int(cand[np.argmax(np.abs(z[cand]))])
            direction = 1.0 if self.vstat[q] == NONBASIC_LOWER else -1.0
            alpha = self.fac.ftran(self.column(q))
            step, kind, row = self._ratio_test(q, direction, alpha)
            if step is None:
                return "unbounded"
            if step <= TOL_FEAS:
                stall += 1
            else:
                stall = 0
            self._apply_pivot(q, direction, alpha, step, kind, row)

    def _ratio_test(self, q, direction, alpha):
        xb = self.x[self.basis]
        lob = self.lower[self.basis]
        upb = self.upper[self.basis]
        d = direction * alpha  # basic values move by -d * t
        t_best = np.inf
        if np.isfinite(self.upper[q]):
            t_best = self.upper[q] - self.lower[q]
        kind, row = "flip", -1
        dec = np.flatnonzero(d > TOL_PIVOT)
        if dec.size:
            ratios = (xb[dec] - lob[dec]) / d[dec]
            ratios = np.maximum(ratios, 0.0)
            k = self._pick(ratios, np.abs(d[dec]))
            if ratios[k] < t_best - 1e-15:
                t_best, kind, row = float(ratios[k]), "lower", int(dec[k])
        inc = np.flatnonzero(d < -TOL_PIVOT)
        if inc.size:
            ub = upb[inc]
            with np.errstate(invalid="ignore"):
                ratios = (ub - xb[inc]) / (-d[inc])
            ratios = np.where(np.isfinite(ub), np.maximum(ratios, 0.0), np.inf)
            k = self._pick(ratios, np.abs(d[inc]))
            if np.isfinite(ratios[k]) and ratios[k] < t_best - 1e-15:
                t_best, kind, row = float(ratios[k]), "upper", int(inc[k])
        if not np.isfinite(t_best):
            return None, None, None
        return t_best, kind, row

    @staticmethod
    def _pick(ratios: np.ndarray, weight: np.ndarray) -> int:
        """Smallest ratio; ties resolved by largest pivot then lowest index."""
        rmin = ratios.min()
        tied = np.flatnonzero(ratios <= rmin + 1e-12)
        if tied.size == 1:
            return int(tied[0])
        return int(tied[np.argmax(weight[tied])])

    def _apply_pivot(self, q, direction, alpha, step, kind, row):
        self.x[q] += direction * step
        self.x[self.basis] -= direction * step * alpha
        if kind == "flip":
            self.vstat[q] = (
                NONBASIC_UPPER if self.vstat[q] == NONBASIC_LOWER else NONBASIC_LOWER
            )
            self.x[q] = (
                self.upper[q] if self.vstat[q] == NONBASIC_UPPER else self.lower[q]
            )
            return
        leaving = int(self.basis[row])
        if abs(alpha[row]) < TOL_PIVOT:
            raise LpError("pivot element vanished")
        self.vstat[leaving] = NONBASIC_LOWER if kind == "lower" else NONBASIC_UPPER
        self.x[leaving] = self.lower[leaving] if kind == "lower" else self.upper[leaving]
        self.in_basis_row[leaving] = -1
        self.basis[row] = q
        self.in_basis_row[q] = row
        self.vstat[q] = BASIC
        self.fac.push_eta(row, alpha)

    # -- dual iteration (feasibility repair for warm starts) ------------------

    def dual(self, cost: np.ndarray, max_iter: int) -> str:
        """Bounded-variable dual simplex from a dual-feasible basis; returns
        "feasible" or "infeasible"."""
        fixed = self.upper - self.lower <= 1e-15
        for _ in range(max_iter):
            if self.fac.needs_refactor:
                self.refactorize()
            xb = self.x[self.basis]
            viol_up = xb - self.upper[self.basis]
            viol_lo = self.lower[self.basis] - xb
            viol = np.maximum(viol_up, viol_lo)
            r = int(np.argmax(viol))
            if viol[r] <= TOL_FEAS:
                return "feasible"
            self.iterations += 1
            above = viol_up[r] >= viol_lo[r]
            e = np.zeros(self.m)
            e[r] = 1.0
            w = self.fac.btran(e)
            arow = self.products(w)
            z = self.reduced_costs(cost)
            if above:
                elig = ((self.vstat == NONBASIC_LOWER) & (arow > TOL_PIVOT)) | (
                    (self.vstat == NONBASIC_UPPER) & (arow < -TOL_PIVOT)
                )
            else:
                elig = ((self.vstat == NONBASIC_LOWER) & (arow < -TOL_PIVOT)) | (
                    (self.vstat == NONBASIC_UPPER) & (arow > TOL_PIVOT)
                )
            elig &= ~fixed
            cand = np.flatnonzero(elig)
            if cand.size == 0:
                return "infeasible"
            ratios = np.abs(z[cand] / arow[cand])
            k = self._pick(ratios, np.abs(arow[cand]))
            q = int(cand[k])
            leaving = int(self.basis[r])
            alpha = self.fac.ftran(self.column(q))
            if abs(alpha[r]) < TOL_PIVOT:
                return "stalled"
            # Move the leaving variable exactly onto its violated bound.
            target = self.upper[leaving] if above else self.lower[leaving]
            delta = (self.x[leaving] - target) / alpha[r]
            self.x[q] += delta
            self.x[self.basis] -= delta * alpha
            self.x[leaving] = target
            self.vstat[leaving] = NONBASIC_UPPER if above else NONBASIC_LOWER
            self.in_basis_row[leaving] = -1
            self.basis[r] = q
            self.in_basis_row[q] = r
            self.vstat[q] = BASIC
            self.fac.push_eta(r, alpha)
        return "stalled"


def _finite_start_value(lo: float, up: float) -> tuple[float, int]:
    if np.isfinite(lo):
        return lo, NONBASIC_LOWER
    return up, NONBASIC_UPPER


def solve_lp(
    p: LpProblem,
    warm: WarmStart | None = None,
    max_iter: int | None = None,
    upper: np.ndarray | None = None,
) -> LpSolution:
    """Solve an :class:`LpProblem`, optionally warm-starting from a previous
    basis.

    ``upper``, when given, replaces the problem's upper bounds for this solve
    only; repeated solves that differ only in bounds (branch-and-bound nodes)
    can then share one problem object.

    Returns an :class:`LpSolution` whose status is one of ``optimal``,
    ``infeasible`` or ``unbounded``.  Raises :class:`LpError` only for
    unrecoverable numerical failure; a wrong "optimal" is never returned.
    """
    if max_iter is None:
        max_iter = 20000 + 50 * (p.n_rows + p.n_vars)

    if warm is not None:
        sol = _solve_warm(p, warm, max_iter, upper)
        if sol is not None:
            return sol
    return _solve_cold(p, max_iter, upper)


def _finish(s: _Simplex, status: str) -> LpSolution:
    if status in ("infeasible", "unbounded"):
        return LpSolution(status, None, None, None, None, None, s.iterations)
    if s.primal_residual() > DRIFT_TOL:
        s.refactorize()
        if s.primal_residual() > 1e-6:
            raise LpError("primal residual drift beyond repair")
    x = s.x[: s.n].copy()
    y = s.fac.btran(s.cost[s.basis])
    obj = float(s.p.c @ x)
    return LpSolution(
        status="optimal",
        x=x,
        obj=obj,
        basis=s.basis.copy(),
        vstat=s.vstat.copy(),
        duals=y,
        iterations=s.iterations,
    )


def _solve_cold(
    p: LpProblem, max_iter: int, upper: np.ndarray | None = None
) -> LpSolution:
    s = _Simplex(p, upper)
    # Start structural variables at their finite bound.
    for j in range(s.n):
        v, st = _finite_start_value(s.lower[j], s.upper[j])
        s.x[j], s.vstat[j] = v, st
    resid = p.b - s.ax(s.x * (np.arange(s.total) < s.n))
    s.art_sign = np.where(resid >= 0.0, 1.0, -1.0)
    s.x[s.n:] = np.abs(resid)
    s.vstat[s.n:] = BASIC
    if not s.set_basis(np.arange(s.n, s.total)):
        raise LpError("artificial basis factorization failed")

    # Phase 1: drive the artificial mass to zero.
    phase1 = np.concatenate([np.zeros(s.n), np.ones(s.m)])
    status = s.primal(phase1, max_iter)
    art_level = float(np.abs(s.x[s.n:]).sum())
    if status != "optimal" or art_level > 1e-7:
        return _finish(s, "infeasible")
    # Pin artificials; any still basic sit at level zero on redundant rows.
    s.lower[s.n:] = 0.0
    s.upper[s.n:] = 0.0
    s.x[s.n:] = np.where(s.vstat[s.n:] == BASIC, s.x[s.n:], 0.0)
    s.vstat[s.n:] = np.where(s.vstat[s.n:] == BASIC, BASIC, NONBASIC_LOWER)

    status = s.primal(s.cost, max_iter)
    return _finish(s, status)


def _solve_warm(
    p: LpProblem,
    warm: WarmStart,
    max_iter: int,
    upper: np.ndarray | None = None,
) -> LpSolution | None:
    """Attempt a warm-started solve; return None to signal a cold fallback."""
    s = _Simplex(p, upper)
    basis = np.asarray(warm.basis, dtype=np.int64)
    vstat = np.asarray(warm.vstat, dtype=np.int8)
    if basis.size != s.m or vstat.size != s.total:
        return None
    if np.unique(basis).size != s.m or basis.min() < 0 or basis.max() >= s.total:
        return None
    s.lower[s.n:] = 0.0
    s.upper[s.n:] = 0.0
    s.vstat = vstat.copy()
    s.vstat[basis] = BASIC
    if not s.set_basis(basis):
        return None
    try:
        s.nonbasic_values()
        s.recompute_basics()
        xb = s.x[s.basis]
        infeas = float(
            np.max(
                np.maximum(
                    xb - s.upper[s.basis], s.lower[s.basis] - xb
                ),
                initial=0.0,
            )
        )
        if infeas > TOL_FEAS:
            outcome = s.dual(s.cost, max_iter=10 * s.m + 200)
            if outcome == "infeasible":
                return _finish(s, "infeasible")
            if outcome != "feasible":
                return None
        status = s.primal(s.cost, max_iter)
        return _finish(s, status)
    except LpError:
        return None
