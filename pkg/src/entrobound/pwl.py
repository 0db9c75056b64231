"""Piecewise-linear underestimation of the pointwise entropy term.

Each cell (i, j) of an instance carries a strictly increasing set of support
points in [0, 1] (always containing 0 and 1).  Chords of the concave
``h(x) = -x ln x`` through consecutive support points form a piecewise-linear
function that underestimates ``h`` everywhere and is exact at the support
points.  The surrogate objective of an instance is the sum of these per-cell
interpolants, and minimizing it over the transportation polytope is done via
a convex-combination (lambda) LP whose blocks are subject to SOS-2 side
constraints handled by the branch-and-bound layer.

Grids are mutated only by the single-threaded refinement loop; evaluation
helpers are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import EntroboundError, MarginalPair, ValidationError, _h_array
from .simplex import LpProblem

MERGE_EPS = 1e-12  # breakpoints closer than this are considered duplicates


class GridFormatError(EntroboundError):
    """A serialized grid could not be parsed."""


@dataclass
class BreakpointGrid:
    """Per-cell support-point sets with cached function values.

    ``points[i][j]`` is a strictly increasing float array containing 0 and 1;
    ``values[i][j]`` caches ``h`` at those points.
    """

    points: list[list[np.ndarray]]
    values: list[list[np.ndarray]]

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def m(self) -> int:
        return len(self.points[0])

    def cell(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        return self.points[i][j], self.values[i][j]

    def sizes(self) -> np.ndarray:
        return np.array(
            [[self.points[i][j].size for j in range(self.m)] for i in range(self.n)]
        )

    def total_points(self) -> int:
        return int(self.sizes().sum())

    def copy(self) -> "BreakpointGrid":
        return BreakpointGrid(
            points=[[t.copy() for t in row] for row in self.points],
            values=[[v.copy() for v in row] for row in self.values],
        )

    def add_breakpoint(self, i: int, j: int, x: float) -> bool:
        """Insert ``x`` into cell (i, j) keeping sorted order.

        Returns True if the grid changed; False (a stall) when ``x`` is within
        ``MERGE_EPS`` of an existing breakpoint.
        """
        if x < 0.0 or x > 1.0:
            raise ValidationError(f"breakpoint {x:.6g} outside [0, 1]")
        tau = self.points[i][j]
        pos = int(np.searchsorted(tau, x))
        near_left = pos > 0 and x - tau[pos - 1] < MERGE_EPS
        near_right = pos < tau.size and tau[pos] - x < MERGE_EPS
        if near_left or near_right:
            return False
        self.points[i][j] = np.insert(tau, pos, x)
        self.values[i][j] = np.insert(self.values[i][j], pos, _h_array(np.array([x]))[0])
        return True

    # -- serialization (checkpoint/resume of long minimizations) ------------

    def serialize(self) -> str:
        lines = [f"entrobound-grid v1 {self.n} {self.m}"]
        for i in range(self.n):
            for j in range(self.m):
                pts = " ".join(f"{t:.17g}" for t in self.points[i][j])
                lines.append(f"cell {i} {j} {pts}")
        return "\n".join(lines) + "\n"

    @classmethod
    def deserialize(cls, text: str) -> "BreakpointGrid":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise GridFormatError("empty grid file")
        head = lines[0].split()
        if len(head) != 4 or head[0] != "entrobound-grid" or head[1] != "v1":
            raise GridFormatError(f"bad grid header: {lines[0]!r}")
        n, m = int(head[2]), int(head[3])
        points = [[None] * m for _ in range(n)]
        for ln in lines[1:]:
            parts = ln.split()
            if parts[0] != "cell" or len(parts) < 5:
                raise GridFormatError(f"bad grid line: {ln!r}")
            i, j = int(parts[1]), int(parts[2])
            tau = np.array([float(t) for t in parts[3:]])
            if np.any(np.diff(tau) <= 0):
                raise GridFormatError(f"cell ({i},{j}) breakpoints not increasing")
            points[i][j] = tau
        if any(t is None for row in points for t in row):
            raise GridFormatError("grid file is missing cells")
        values = [[_h_array(t) for t in row] for row in points]
        return cls(points=points, values=values)


def init_breakpoints(marg: MarginalPair) -> BreakpointGrid:
    """Initial grids ``{0, min(mu_i, nu_j), 1}`` per cell.

    When ``min(mu_i, nu_j)`` falls within ``MERGE_EPS`` of 0 or 1 the
    duplicate is merged away.
    """
    points: list[list[np.ndarray]] = []
    for i in range(marg.n):
        row = []
        for j in range(marg.m):
            mid = float(min(marg.mu[i], marg.nu[j]))
            if mid < MERGE_EPS or mid > 1.0 - MERGE_EPS:
                tau = np.array([0.0, 1.0])
            else:
                tau = np.array([0.0, mid, 1.0])
            row.append(tau)
        points.append(row)
    values = [[_h_array(t) for t in row] for row in points]
    return BreakpointGrid(points=points, values=values)


def surrogate_eval(
    tau: np.ndarray, x: float, values: np.ndarray | None = None
) -> float:
    """Piecewise-linear interpolant of ``h`` through ``tau``, evaluated at x.

    Exact at breakpoints and a pointwise underestimator of ``h`` elsewhere
    (chords of a concave function).  ``x`` must lie in ``[tau[0], tau[-1]]``
    up to a 1e-12 grace for floating-point noise.
    """
    tau = np.asarray(tau, dtype=float)
    if values is None:
        values = _h_array(tau)
    if x < tau[0] - 1e-12 or x > tau[-1] + 1e-12:
        raise ValidationError(
            f"surrogate evaluation point {x:.6g} outside [{tau[0]:.6g}, {tau[-1]:.6g}]"
        )
    x = min(max(x, tau[0]), tau[-1])
    k = int(np.searchsorted(tau, x, side="right")) - 1
    k = min(max(k, 0), tau.size - 2)
    t0, t1 = tau[k], tau[k + 1]
    slope = (values[k + 1] - values[k]) / (t1 - t0)
    return float(values[k] + slope * (x - t0))


def surrogate_matrix(p: np.ndarray, grid: BreakpointGrid) -> float:
    """Sum of per-cell interpolants at the entries of ``p``."""
    total = 0.0
    for i in range(grid.n):
        for j in range(grid.m):
            tau, val = grid.cell(i, j)
            total += surrogate_eval(tau, float(p[i, j]), val)
    return total


def surrogate_gap(
    p: np.ndarray, grid: BreakpointGrid
) -> tuple[np.ndarray, tuple[int, int]]:
    """Cellwise ``|h(P_ij) - interpolant(P_ij)|`` and its argmax cell.

    Ties are broken toward the smallest (i, j) in row-major order.
    """
    n, m = grid.n, grid.m
    errors = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            x = float(min(max(p[i, j], 0.0), 1.0))
            tau, val = grid.cell(i, j)
            approx = surrogate_eval(tau, x, val)
            exact = float(_h_array(np.array([x]))[0])
            errors[i, j] = abs(exact - approx)
    flat = int(np.argmax(errors))  # first maximum = row-major smallest
    return errors, (flat // m, flat % m)


@dataclass(frozen=True)
class LambdaMap:
    """Bookkeeping between grid cells and their lambda-variable blocks.

    Cells are laid out row-major; ``starts`` has ``n*m + 1`` offsets so the
    block of cell (i, j) is ``range(starts[i*m+j], starts[i*m+j+1])``.
    """

    n: int
    m: int
    starts: np.ndarray

    def block(self, i: int, j: int) -> tuple[int, int]:
        k = i * self.m + j
        return int(self.starts[k]), int(self.starts[k + 1])

    @property
    def n_vars(self) -> int:
        return int(self.starts[-1])

    def cell_values(self, x: np.ndarray, grid: BreakpointGrid) -> np.ndarray:
        """Recover ``P_ij = sum_r lambda_r tau_r`` from a lambda vector."""
        p = np.zeros((self.n, self.m))
        for i in range(self.n):
            for j in range(self.m):
                lo, hi = self.block(i, j)
                p[i, j] = float(x[lo:hi] @ grid.points[i][j])
        return p


def build_lambda_lp(
    marg: MarginalPair, grid: BreakpointGrid
) -> tuple[LpProblem, LambdaMap]:
    """Assemble the lambda-form LP relaxation of the surrogate minimization.

    Variables are the per-cell convex-combination weights.  Rows: one
    convexity equality per cell (weights sum to 1), then the n row-sum and m
    column-sum equalities with the substitution ``P_ij = sum_r lambda_r
    tau_r``.  One transportation row is always redundant; the LP solver
    handles that.  The objective is the same combination of cached ``h``
    values.

    Since any feasible plan satisfies ``P_ij <= min(mu_i, nu_j)``, weights on
    breakpoints above that cap carry the tightened upper bound
    ``min(mu_i,nu_j)/tau_r``; this cuts LP-relaxation slack without excluding
    any feasible plan.
    """
    n, m = marg.n, marg.m
    if grid.n != n or grid.m != m:
        raise ValidationError("grid shape does not match marginals")
    sizes = grid.sizes().ravel()
    starts = np.concatenate([[0], np.cumsum(sizes)])
    lmap = LambdaMap(n=n, m=m, starts=starts)
    n_vars = lmap.n_vars
    n_rows = n * m + n + m

    data: list[float] = []
    ri: list[int] = []
    ci: list[int] = []
    cost = np.zeros(n_vars)
    upper = np.ones(n_vars)
    for i in range(n):
        for j in range(m):
            cellrow = i * m + j
            lo, hi = lmap.block(i, j)
            tau, hval = grid.cell(i, j)
            cap = float(min(marg.mu[i], marg.nu[j]))
            for r, (t, hv) in enumerate(zip(tau, hval)):
                v = lo + r
                ri.append(cellrow); ci.append(v); data.append(1.0)
                if t != 0.0:
                    ri.append(n * m + i); ci.append(v); data.append(t)
                    ri.append(n * m + n + j); ci.append(v); data.append(t)
                cost[v] = hv
                if t > cap + MERGE_EPS:
                    upper[v] = cap / t
    A = sp.csc_matrix(
        sp.coo_matrix((data, (ri, ci)), shape=(n_rows, n_vars))
    )
    b = np.concatenate([np.ones(n * m), marg.mu, marg.nu])
    problem = LpProblem(c=cost, A=A, b=b, lower=np.zeros(n_vars), upper=upper)
    return problem, lmap
