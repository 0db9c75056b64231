"""Branch-and-bound minimization of the separable PWL surrogate.

The surrogate objective is concave and piecewise linear, so its LP relaxation
in the lambda formulation is weak on wide breakpoint windows; global
optimality is recovered by SOS-2 branching: each cell's lambda block may have
at most two nonzero weights and they must be consecutive.  A node restricts
every block to a contiguous breakpoint window; branching splits a window at
the breakpoint bracketing the plan value the LP induces, in the cell whose
chord envelope underestimates the surrogate most at that LP point.

Two structural facts carry the design:

* Any feasible plan satisfies ``P_ij <= min(mu_i, nu_j)``, which is always a
  support point, so root windows stop at that cap; otherwise the relaxation
  collapses to the useless 0-chord between ``h(0) = h(1) = 0``.
* A node's LP bound is the sum of window-endpoint chords, and chords do not
  move when new support points (which lie on the concave curve, above every
  chord) are inserted.  Node certificates therefore stay valid across
  refinements of the surrogate, which lets the alternation loop keep one
  persistent search tree instead of re-certifying from scratch after every
  support-point insertion.  :class:`SurrogateBnb` implements that persistent
  tree; :func:`solve_sos2_milp` runs one instance of it to full certification.

Every node's LP plan is rounded to an SOS-2-feasible incumbent (the plan
induced by any LP point is feasible for the marginals, so the true surrogate
value there is always a valid upper bound).  Node selection is
best-bound-first with depth-first plunging into the child containing the
current plan value.  Tie-breaking is by lowest index throughout, so solves
are deterministic for fixed inputs and limits.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .core import EntroboundError, JointDistribution, MarginalPair
from .pwl import BreakpointGrid, LambdaMap, build_lambda_lp
from .simplex import NONBASIC_LOWER, LpSolution, WarmStart, solve_lp

DEFAULT_INNER_GAP = 1e-7
_SOS2_TOL = 1e-9  # lambda mass below this does not count as support


class MilpInternalError(EntroboundError):
    """The lambda LP was infeasible for valid marginals (a construction bug)."""


@dataclass
class BnbNode:
    """Self-contained search node: per-cell active breakpoint windows plus the
    parent basis for a warm start.  ``stamp`` counts how many grid insertions
    the node has been translated through; ``decision`` caches the branching
    choice (cell, split, plunge-low side) computed when the node's LP was
    solved, so a node re-opened by a later threshold rise can branch without
    solving the identical LP again."""

    windows: np.ndarray  # (n_cells, 2) inclusive index ranges
    bound: float
    depth: int
    warm: WarmStart | None
    seq: int
    stamp: int = 0
    decision: tuple[int, int, bool] | None = None

    def __lt__(self, other: "BnbNode") -> bool:
        return (self.bound, self.seq) < (other.bound, other.seq)


@dataclass(frozen=True)
class MilpResult:
    """Certified result of one surrogate minimization."""

    incumbent: JointDistribution
    incumbent_value: float
    global_lower_bound: float
    nodes_explored: int
    status: str  # "optimal" | "gap_limit" | "node_limit"


def sos2_violation(
    x: np.ndarray,
    lmap: LambdaMap,
    windows: np.ndarray | None = None,
) -> tuple[tuple[int, int] | None, int]:
    """Find the cell whose lambda block most violates the SOS-2 condition.

    Returns ``(None, -1)`` when every block has its nonzero mass on at most
    two consecutive entries.  Otherwise returns the cell with the largest
    non-adjacent mass (mass not covered by the best adjacent pair or single
    entry) and the block-local index of the mass-weighted median breakpoint
    as a window split point.
    """
    worst_cell: tuple[int, int] | None = None
    worst_viol = _SOS2_TOL
    worst_split = -1
    for i in range(lmap.n):
        for j in range(lmap.m):
            lo, hi = lmap.block(i, j)
            lam = x[lo:hi]
            if windows is not None:
                wlo, whi = windows[i * lmap.m + j]
            else:
                wlo, whi = 0, hi - lo - 1
            if whi - wlo < 2:
                continue
            seg = lam[wlo : whi + 1]
            total = float(seg.sum())
            if total <= _SOS2_TOL:
                continue
            pair = float(np.max(seg[:-1] + seg[1:])) if seg.size > 1 else float(seg[0])
            viol = total - max(pair, float(seg.max()))
            if viol > worst_viol:
                cum = np.cumsum(seg)
                med = int(np.searchsorted(cum, total / 2.0))
                med = min(max(med, 1), seg.size - 2)
                worst_cell = (i, j)
                worst_viol = viol
                worst_split = wlo + med
    return worst_cell, worst_split


class SurrogateBnb:
    """Persistent SOS-2 branch-and-bound over one instance's surrogate.

    The tree survives support-point insertions: node bounds are chord sums,
    which refinement cannot lower, so fathomed regions stay fathomed and only
    the frontier below the current pruning threshold is ever re-examined.
    Stale nodes are lazily translated to the current column numbering when
    popped.
    """

    def __init__(
        self,
        marg: MarginalPair,
        grid: BreakpointGrid,
        inner_gap: float = DEFAULT_INNER_GAP,
        trace_path=None,
    ):
        self.marg = marg
        self.grid = grid
        self.inner_gap = inner_gap
        self.trace_path = trace_path
        self.trace_rows: list[str] = []
        self.caps = np.minimum.outer(marg.mu, marg.nu).ravel()
        self.incumbent_p: np.ndarray | None = None
        self.incumbent_value = np.inf
        self.nodes_explored = 0
        self.insertions: list[tuple[int, int, int]] = []  # (var_idx, cell, pos)
        self._seq = 0
        self._rebuild()
        n_cells = grid.n * grid.m
        root_windows = np.zeros((n_cells, 2), dtype=np.int64)
        root_windows[:, 1] = self.win_hi
        self.pool: list[BnbNode] = [
            BnbNode(root_windows, -np.inf, 0, None, self._seq)
        ]
        self._root_solved = False

    # -- grid coupling -------------------------------------------------------

    def _rebuild(self) -> None:
        grid, marg = self.grid, self.marg
        self.base_problem, self.lmap = build_lambda_lp(marg, grid)
        self.base_upper = self.base_problem.upper.copy()
        self.sizes = np.diff(self.lmap.starts).astype(np.int64)
        self.win_hi = np.empty(grid.n * grid.m, dtype=np.int64)
        taus = [grid.points[i][j] for i in range(grid.n) for j in range(grid.m)]
        for k, tau in enumerate(taus):
            r = int(np.searchsorted(tau, self.caps[k] - 1e-12))
            self.win_hi[k] = min(r, tau.size - 1)
        vals = [grid.values[i][j] for i in range(grid.n) for j in range(grid.m)]
        shift = 2.0 * np.arange(len(taus))
        self._interp_x = np.concatenate([t + s for t, s in zip(taus, shift)])
        self._interp_y = np.concatenate(vals)
        self._interp_shift = shift
        self._tau_flat = np.concatenate(taus)
        self._taus = taus
        self._block_starts = self.lmap.starts[:-1].astype(np.intp)

    def refine(self, cell: tuple[int, int], x: float) -> bool:
        """Insert a support point and translate solver state.

        Returns False (without changing anything) when the point duplicates
        an existing breakpoint.
        """
        i, j = cell
        tau = self.grid.points[i][j]
        pos = int(np.searchsorted(tau, x))
        if not self.grid.add_breakpoint(i, j, x):
            return False
        k = i * self.grid.m + j
        var_idx = int(self._block_starts[k]) + pos
        self.insertions.append((var_idx, k, pos))
        self._rebuild()
        if self.incumbent_p is not None:
            # the refined surrogate majorizes the old one; re-evaluate
            self.incumbent_value = self._surrogate_at(self.incumbent_p)
        return True

    def _refresh(self, node: BnbNode) -> None:
        for t in range(node.stamp, len(self.insertions)):
            var_idx, k, pos = self.insertions[t]
            if pos <= node.windows[k, 0]:
                node.windows[k, 0] += 1
            if pos <= node.windows[k, 1]:
                node.windows[k, 1] += 1
            if node.decision is not None and node.decision[0] == k:
                cell_k, split, low = node.decision
                if pos <= split:
                    node.decision = (cell_k, split + 1, low)
            if node.warm is not None:
                basis = node.warm.basis.copy()
                basis[basis >= var_idx] += 1
                vstat = np.insert(node.warm.vstat, var_idx, NONBASIC_LOWER)
                node.warm = WarmStart(basis=basis, vstat=vstat)
        node.stamp = len(self.insertions)

    # -- bookkeeping -----------------------------------------------------------

    def _abs_gap(self) -> float:
        if not np.isfinite(self.incumbent_value):
            return 0.0
        return self.inner_gap * max(1.0, abs(self.incumbent_value))

    def threshold(self) -> float:
        return self.incumbent_value - self._abs_gap()

    def global_lower_bound(self) -> float:
        glb = self.pool[0].bound if self.pool else np.inf
        if not np.isfinite(glb):
            glb = self.incumbent_value
        return float(min(glb, self.incumbent_value))

    def certified(self) -> bool:
        return not self.pool or self.pool[0].bound >= self.threshold()

    def _surrogate_at(self, p: np.ndarray) -> float:
        x = np.clip(p.ravel(), 0.0, 1.0) + self._interp_shift
        return float(np.interp(x, self._interp_x, self._interp_y).sum())

    def offer_incumbent(self, p: np.ndarray) -> None:
        p = np.clip(np.asarray(p, dtype=float), 0.0, None)
        s = p.sum()
        if s <= 0:
            return
        p = p / s
        value = self._surrogate_at(p)
        if value < self.incumbent_value - 1e-12:
            self.incumbent_value = value
            self.incumbent_p = p

    def _cell_stats(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Induced plan values and per-cell envelope deficits of an LP point.

        A cell's deficit is the gap between the interpolant at the induced
        value and the LP's objective contribution for that block; it vanishes
        exactly when the block admits an SOS-2 representation of equal cost,
        so a node with zero deficit everywhere is fathomed by its own bound.
        """
        starts = self._block_starts
        plan = np.add.reduceat(x * self._tau_flat, starts)
        contrib = np.add.reduceat(x * self.base_problem.c, starts)
        pwl = np.interp(
            np.clip(plan, 0.0, 1.0) + self._interp_shift,
            self._interp_x,
            self._interp_y,
        )
        return plan, pwl - contrib

    def _solve_node_lp(self, node: BnbNode) -> LpSolution:
        windows = node.windows
        upper = self.base_upper.copy()
        for k in range(windows.shape[0]):
            lo, size = int(self._block_starts[k]), int(self.sizes[k])
            wlo, whi = int(windows[k, 0]), int(windows[k, 1])
            if wlo > 0:
                upper[lo : lo + wlo] = 0.0
            if whi < size - 1:
                upper[lo + whi + 1 : lo + size] = 0.0
        return solve_lp(self.base_problem, warm=node.warm, upper=upper)

    def _trace(self, depth: int, bound: float, event: str) -> None:
        if self.trace_path is None:
            return
        inc = self.incumbent_value if np.isfinite(self.incumbent_value) else ""
        self.trace_rows.append(
            f"{self.nodes_explored},{depth},{bound:.12g},{inc},{event}"
        )

    def flush_trace(self) -> None:
        if self.trace_path is None:
            return
        with open(self.trace_path, "w", encoding="utf-8") as fh:
            fh.write("node,depth,bound,incumbent,event\n")
            fh.write("\n".join(self.trace_rows))
            if self.trace_rows:
                fh.write("\n")

    # -- search -----------------------------------------------------------------

    def _branch(
        self, node: BnbNode, k: int, split: int, plunge_low: bool
    ) -> tuple[BnbNode, BnbNode]:
        """Split cell k's window at breakpoint index ``split`` (standard SOS-2
        branching with overlap at the split point); returns (plunged, queued)."""
        left = node.windows.copy()
        left[k, 1] = split
        right = node.windows  # parent is discarded; reuse its array
        right[k, 0] = split
        self._seq += 1
        child_l = BnbNode(
            left, node.bound, node.depth + 1, node.warm, self._seq, node.stamp
        )
        self._seq += 1
        child_r = BnbNode(
            right, node.bound, node.depth + 1, node.warm, self._seq, node.stamp
        )
        return (child_l, child_r) if plunge_low else (child_r, child_l)

    def process(
        self,
        node_budget: int | None = None,
        time_budget: float | None = None,
    ) -> str:
        """Expand frontier nodes until the pool certifies the incumbent within
        the inner gap, or a budget runs out.

        Returns "optimal" when certified, "node_limit" or "gap_limit" (time)
        otherwise.
        """
        t0 = time.perf_counter()
        spent = 0
        pending: BnbNode | None = None
        while True:
            if pending is None:
                if self.certified():
                    return "optimal"
                node = heapq.heappop(self.pool)
            else:
                node, pending = pending, None
            if node.bound >= self.threshold():
                heapq.heappush(self.pool, node)
                continue
            if node_budget is not None and spent >= node_budget:
                heapq.heappush(self.pool, node)
                return "node_limit"
            if time_budget is not None and time.perf_counter() - t0 > time_budget:
                heapq.heappush(self.pool, node)
                return "gap_limit"
            self._refresh(node)
            # a vertex has at most n+m-1 positive entries; regions whose
            # windows force more cells positive contain no extreme point and
            # can never hold a global minimizer of the concave surrogate
            forced_pos = self._tau_flat[self._block_starts + node.windows[:, 0]] > 1e-15
            if int(forced_pos.sum()) > self.grid.n + self.grid.m - 1:
                self._trace(node.depth, np.inf, "no-vertex")
                continue
            if node.decision is not None:
                # re-opened after a threshold rise: the LP (chord costs over
                # unchanged window endpoints) would solve to the same bound,
                # so branch straight away on the cached decision
                k, split, low = node.decision
                wlo, whi = int(node.windows[k, 0]), int(node.windows[k, 1])
                if whi - wlo >= 2 and wlo < split < whi:
                    pending, queued = self._branch(node, k, split, low)
                    heapq.heappush(self.pool, queued)
                    self._trace(node.depth, node.bound, "rebranched")
                    continue
                node.decision = None
            sol = self._solve_node_lp(node)
            self.nodes_explored += 1
            spent += 1
            if sol.status == "unbounded":
                raise MilpInternalError("lambda LP unbounded; construction bug")
            if sol.status == "infeasible":
                if node.depth == 0:
                    raise MilpInternalError(
                        "root lambda LP infeasible for valid marginals"
                    )
                # drop the node: an infeasible region constrains nothing
                self._trace(node.depth, np.inf, "infeasible")
                continue
            bound = max(sol.obj, node.bound)  # child region nests in parent
            plan, deficit = self._cell_stats(sol.x)
            self.offer_incumbent(plan.reshape(self.grid.n, self.grid.m))
            deficit = np.where(
                node.windows[:, 1] - node.windows[:, 0] >= 2, deficit, 0.0
            )
            k = int(np.argmax(deficit))
            node.bound = bound
            node.warm = WarmStart(sol.basis, sol.vstat)
            if deficit[k] <= 1e-12:
                # LP value equals the plan's true surrogate value here; the
                # incumbent update above makes the bound test final
                node.decision = None
                heapq.heappush(self.pool, node)
                self._trace(node.depth, bound, "integral")
                continue
            wlo, whi = int(node.windows[k, 0]), int(node.windows[k, 1])
            tau = self._taus[k]
            split = int(np.searchsorted(tau[wlo : whi + 1], plan[k])) - 1 + wlo
            split = min(max(split, wlo + 1), whi - 1)
            plunge_low = bool(plan[k] <= tau[split])
            if bound >= self.threshold():
                # certificate good enough for now; remember how to branch if a
                # later incumbent re-opens this region
                node.decision = (k, split, plunge_low)
                heapq.heappush(self.pool, node)
                self._trace(node.depth, bound, "pruned")
                continue
            self._trace(node.depth, bound, "branched")
            pending, queued = self._branch(node, k, split, plunge_low)
            heapq.heappush(self.pool, queued)

    def result(self, status: str) -> MilpResult:
        if self.incumbent_p is None:
            raise MilpInternalError("no incumbent found; construction bug")
        return MilpResult(
            incumbent=JointDistribution(self.incumbent_p),
            incumbent_value=float(self.incumbent_value),
            global_lower_bound=self.global_lower_bound(),
            nodes_explored=self.nodes_explored,
            status=status,
        )


def solve_sos2_milp(
    marg: MarginalPair,
    grid: BreakpointGrid,
    inner_gap: float = DEFAULT_INNER_GAP,
    node_limit: int | None = None,
    time_limit: float | None = None,
    initial_incumbent: np.ndarray | None = None,
    trace_path=None,
) -> MilpResult:
    """Globally minimize the surrogate objective over the transportation
    polytope, certified within relative gap ``inner_gap``.

    ``initial_incumbent`` (any feasible plan) speeds up pruning without
    affecting the certificate.  ``trace_path`` writes one CSV line per node:
    ``node,depth,bound,incumbent,event``.
    """
    bnb = SurrogateBnb(marg, grid.copy(), inner_gap, trace_path)
    if initial_incumbent is not None:
        bnb.offer_incumbent(initial_incumbent)
    status = bnb.process(node_budget=node_limit, time_budget=time_limit)
    bnb.flush_trace()
    return bnb.result(status)
