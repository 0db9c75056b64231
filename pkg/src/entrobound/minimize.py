"""Global entropy minimization by alternating surrogate solves and refinement.

The loop: globally minimize the current piecewise-linear surrogate (SOS-2
branch-and-bound), find the cell where the surrogate deviates most from the
true entropy term at the computed plan, add that plan entry as a new support
point of that cell, and re-solve, until the relative gap between true and
surrogate objective at the iterate falls below ``eps``.  Because chords of a
concave function lie below it, every surrogate optimum is a certified lower
bound and the true entropy of the iterate an upper bound, so the final gap is
a global-optimality certificate.

The surrogate solver keeps one persistent branch-and-bound tree across all
refinements (support-point insertion never lowers a node's chord bound), so
each iteration only pays for the new frontier instead of a full re-solve.

``brute_force_min`` provides the independent oracle: at least one global
minimizer sits at an extreme point of the transportation polytope, and the
extreme points are exactly the feasible flows on spanning trees of the
complete bipartite support graph, which we enumerate exhaustively on small
instances.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .core import (
    JointDistribution,
    MarginalPair,
    TOL_DENOM,
    ValidationError,
    _h_array,
    entropy,
)
from .pwl import BreakpointGrid, init_breakpoints, surrogate_gap
from .sos2 import DEFAULT_INNER_GAP, SurrogateBnb

BRUTE_FORCE_GUARD = 10  # refuse enumeration when n + m exceeds this


@dataclass(frozen=True)
class IterationRecord:
    """One outer iteration: certified surrogate value, true entropy of the
    iterate, the resulting gaps, and refinement bookkeeping."""

    surrogate_value: float
    true_value: float
    eps: float
    certified_eps: float
    lower_bound: float
    argmax_cell: tuple[int, int]
    max_error: float
    nodes: int
    absolute_gap_used: bool


@dataclass
class MinResult:
    p_min: JointDistribution
    h_min: float
    h_surrogate: float
    eps_history: list[float]
    iterations: int
    total_nodes: int
    status: str  # "converged" | "iteration_limit" | "stalled"
    history: list[IterationRecord] = field(default_factory=list)
    detail: str = ""


# -- checkpointing -----------------------------------------------------------


def _checkpoint_path(checkpoint_dir: str, tag: str) -> str:
    return os.path.join(checkpoint_dir, f"{tag}.ckpt")


def _write_checkpoint(path, grid, iteration, eps_history, incumbent) -> None:
    lines = ["entrobound-checkpoint v1", f"iteration {iteration}"]
    lines.append("eps " + " ".join(f"{e:.17g}" for e in eps_history))
    for row in np.asarray(incumbent):
        lines.append("incumbent " + " ".join(f"{v:.17g}" for v in row))
    body = "\n".join(lines) + "\n" + grid.serialize()
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(body)
    os.replace(tmp, path)


def _read_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    head, grid_text = text.split("entrobound-grid", 1)
    grid = BreakpointGrid.deserialize("entrobound-grid" + grid_text)
    iteration = 0
    eps_history: list[float] = []
    inc_rows: list[list[float]] = []
    for ln in head.splitlines():
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "iteration":
            iteration = int(parts[1])
        elif parts[0] == "eps":
            eps_history = [float(v) for v in parts[1:]]
        elif parts[0] == "incumbent":
            inc_rows.append([float(v) for v in parts[1:]])
    incumbent = np.array(inc_rows) if inc_rows else None
    return grid, iteration, eps_history, incumbent


# -- the alternation loop ------------------------------------------------------


def default_iteration_cap(n: int, m: int, eps: float) -> int:
    return int(10 * n * m * np.ceil(np.log2(1.0 / eps)))


def minimize_entropy(
    marg: MarginalPair,
    eps: float = 1e-4,
    inner_gap: float | None = None,
    iteration_limit: int | None = None,
    node_limit: int | None = None,
    time_limit: float | None = None,
    checkpoint_dir: str | None = None,
    checkpoint_tag: str = "instance",
    checkpoint_every: int = 25,
    multi_cell: bool = False,
) -> MinResult:
    """Compute the global entropy minimum over all joints with the given
    marginals, to relative tolerance ``eps``.

    Termination checks the branch-and-bound's certified global lower bound,
    which makes the final iterate epsilon-optimal regardless of the inner
    gap; ``inner_gap`` therefore defaults to ``eps / 4`` here (still well
    below the outer tolerance).  Pass a value explicitly to pin it.

    ``multi_cell=True`` additionally refines every cell whose surrogate error
    is at least half the maximum (off by default; the canonical loop refines
    only the argmax cell).  With ``checkpoint_dir`` set, grid and incumbent
    are serialized every ``checkpoint_every`` iterations and an existing
    checkpoint for the same tag is resumed (the search tree itself is not
    checkpointed and is re-certified on resume).
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    if inner_gap is None:
        inner_gap = max(eps / 4.0, 1e-12)
    n, m = marg.n, marg.m
    if iteration_limit is None:
        iteration_limit = default_iteration_cap(n, m, eps)

    grid = init_breakpoints(marg)
    k = 0
    eps_history: list[float] = []
    incumbent: np.ndarray | None = None
    ckpt_path = None
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        ckpt_path = _checkpoint_path(checkpoint_dir, checkpoint_tag)
        if os.path.exists(ckpt_path):
            grid, k, eps_history, incumbent = _read_checkpoint(ckpt_path)

    bnb = SurrogateBnb(marg, grid, inner_gap=inner_gap)
    if incumbent is not None:
        bnb.offer_incumbent(incumbent)

    history: list[IterationRecord] = []
    status = "converged"
    detail = ""
    last_p: np.ndarray | None = incumbent
    last_surrogate = np.nan
    last_true = np.nan
    t_start = time.perf_counter()

    def remaining_time() -> float | None:
        if time_limit is None:
            return None
        return max(time_limit - (time.perf_counter() - t_start), 0.01)

    def remaining_nodes() -> int | None:
        if node_limit is None:
            return None
        return max(node_limit - bnb.nodes_explored, 1)

    while True:
        if k >= iteration_limit:
            status = "iteration_limit"
            detail = f"iteration cap {iteration_limit} reached"
            break
        k += 1
        inner_status = bnb.process(
            node_budget=remaining_nodes(), time_budget=remaining_time()
        )
        p_k = bnb.incumbent_p
        h_k = bnb.incumbent_value  # surrogate value before this refinement
        h_true = entropy(np.asarray(p_k))
        glb = bnb.global_lower_bound()
        last_p, last_surrogate, last_true = p_k, h_k, h_true

        errors, cell = surrogate_gap(p_k, grid)
        max_err = float(errors[cell])

        abs_gap_used = abs(h_k) <= TOL_DENOM
        gap = abs(h_true - h_k)
        eps_k = gap if abs_gap_used else gap / abs(h_k)
        cert_gap = abs(h_true - glb)
        eps_cert = cert_gap if abs(glb) <= TOL_DENOM else cert_gap / abs(glb)
        eps_history.append(float(eps_k))
        history.append(
            IterationRecord(
                surrogate_value=h_k,
                true_value=h_true,
                eps=float(eps_k),
                certified_eps=float(eps_cert),
                lower_bound=glb,
                argmax_cell=cell,
                max_error=max_err,
                nodes=bnb.nodes_explored,
                absolute_gap_used=abs_gap_used,
            )
        )

        if ckpt_path is not None and k % checkpoint_every == 0:
            _write_checkpoint(ckpt_path, grid, k, eps_history, p_k)

        if eps_cert < eps:
            status = "converged"
            break
        if inner_status != "optimal":
            status = "iteration_limit"
            detail = f"inner solve stopped with status {inner_status}"
            break

        stalled = False
        if multi_cell:
            thresh = max(0.5 * max_err, 1e-15)
            cells = [
                (i, j) for i in range(n) for j in range(m) if errors[i, j] >= thresh
            ] or [cell]
            changed = [
                bnb.refine(c, float(np.clip(p_k[c], 0.0, 1.0))) for c in cells
            ]
            stalled = not any(changed)
        else:
            x_new = float(np.clip(p_k[cell], 0.0, 1.0))
            if not bnb.refine(cell, x_new):
                # duplicate support point: refine the bracketing segment midpoint
                tau = grid.points[cell[0]][cell[1]]
                seg = int(np.searchsorted(tau, x_new, side="right")) - 1
                seg = min(max(seg, 0), tau.size - 2)
                mid = 0.5 * (tau[seg] + tau[seg + 1])
                stalled = not bnb.refine(cell, float(mid))
        if stalled:
            status = "stalled"
            detail = "breakpoint insertion stalled (duplicate within merge tolerance)"
            break
        if time_limit is not None and time.perf_counter() - t_start > time_limit:
            status = "iteration_limit"
            detail = "time limit reached"
            break

    if last_p is None:
        raise ValidationError("minimization produced no iterate")
    if np.isnan(last_true):
        last_true = entropy(np.asarray(last_p))
        last_surrogate = bnb._surrogate_at(np.asarray(last_p))
    if ckpt_path is not None:
        _write_checkpoint(ckpt_path, grid, k, eps_history, last_p)
    return MinResult(
        p_min=JointDistribution(last_p),
        h_min=float(last_true),
        h_surrogate=float(last_surrogate),
        eps_history=eps_history,
        iterations=k,
        total_nodes=bnb.nodes_explored,
        status=status,
        history=history,
        detail=detail,
    )


# -- extreme-point oracle -----------------------------------------------------


def spanning_tree_edges(n: int, m: int) -> Iterator[list[tuple[int, int]]]:
    """Enumerate the edge sets of all spanning trees of the complete bipartite
    graph on n row-nodes and m column-nodes, each exactly once.

    A tree rooted at row 0 is identified with its parent assignment: every
    column has a parent row and every row but the root has a parent column;
    enumerating all cycle-free assignments yields each tree once.
    """
    total = n + m
    edges: list[tuple[int, int]] = []

    def rec(k: int, comp: list[int]) -> Iterator[list[tuple[int, int]]]:
        if k == total - 1:
            yield list(edges)
            return
        if k < m:
            child = n + k  # column node k chooses a parent row
            choices = range(n)
        else:
            child = k - m + 1  # row node (k-m+1) chooses a parent column
            choices = range(m)
        for c in choices:
            parent = c if k < m else n + c
            cu, cv = comp[parent], comp[child]
            if cu == cv:
                continue
            merged = [cu if x == cv else x for x in comp]
            edges.append((child, c) if k >= m else (c, k))
            yield from rec(k + 1, merged)
            edges.pop()

    yield from rec(0, list(range(total)))


def _tree_flow(
    n: int, m: int, tree: list[tuple[int, int]], mu: np.ndarray, nu: np.ndarray
) -> np.ndarray | None:
    """Unique flow on a spanning tree meeting the marginals; None when some
    flow is negative (the tree is not a feasible basis)."""
    total = n + m
    adj: list[list[tuple[int, int]]] = [[] for _ in range(total)]
    for e, (i, j) in enumerate(tree):
        u, v = i, n + j
        adj[u].append((v, e))
        adj[v].append((u, e))
    res = np.concatenate([mu, nu]).astype(float)
    deg = np.array([len(a) for a in adj])
    done_edge = [False] * len(tree)
    flows = np.zeros(len(tree))
    stack = [u for u in range(total) if deg[u] == 1]
    while stack:
        u = stack.pop()
        if deg[u] != 1:
            continue
        for v, e in adj[u]:
            if not done_edge[e]:
                f = res[u]
                if f < -1e-12:
                    return None
                flows[e] = f
                res[v] -= f
                done_edge[e] = True
                deg[u] -= 1
                deg[v] -= 1
                if deg[v] == 1:
                    stack.append(v)
                break
    if any(f < -1e-12 for f in flows):
        return None
    p = np.zeros((n, m))
    for e, (i, j) in enumerate(tree):
        p[i, j] = max(flows[e], 0.0)
    return p


def transportation_vertices(marg: MarginalPair) -> Iterator[np.ndarray]:
    """All extreme points of the transportation polytope (with repetition for
    degenerate vertices reachable from several trees)."""
    n, m = marg.n, marg.m
    if n + m > BRUTE_FORCE_GUARD:
        raise ValidationError(
            f"vertex enumeration refused for n + m = {n + m} > {BRUTE_FORCE_GUARD}"
        )
    for tree in spanning_tree_edges(n, m):
        p = _tree_flow(n, m, tree, marg.mu, marg.nu)
        if p is not None:
            yield p


def brute_force_min(marg: MarginalPair) -> tuple[float, np.ndarray]:
    """Exhaustive entropy minimum over the extreme points of the polytope.

    Valid as a global oracle because at least one minimizer of the strictly
    concave entropy lies at an extreme point.  Guarded to n + m <= 10.
    """
    best_val = np.inf
    best_p: np.ndarray | None = None
    for p in transportation_vertices(marg):
        val = float(_h_array(p).sum())
        if val < best_val - 1e-15:
            best_val = val
            best_p = p
    if best_p is None:
        raise ValidationError("no feasible vertex found (invalid marginals?)")
    return best_val, best_p
