"""Entropy bounds and scaled mutual-information ratios for contingency tables.

For a joint discrete distribution with fixed marginals, this package computes
the global minimum and maximum of the Shannon entropy over the transportation
polytope and uses them to place the observed entropy of a contingency table on
a normalized [0, 1] scale (the scaled MI ratio).  All optimization machinery
is built in-house: a bounded-variable revised simplex, an SOS-2
branch-and-bound for the piecewise-linear surrogate minimization, and a
null-space Newton method for the maximization.
"""

from .core import (
    EntroboundError,
    JointDistribution,
    MarginalMismatchError,
    MarginalPair,
    TrivialInstanceError,
    ValidationError,
    entropy,
    h_point,
    marginal_entropy,
    marginals_of,
    mi_ratio,
    mutual_information,
    product_joint,
)
from .ingest import (
    ContingencyTable,
    ParseError,
    ReducedInstance,
    load_dataset,
    parse_table,
    reduce_table,
    synth_dataset,
)
from .maximize import MaxResult, analytic_max, eta_bound, kkt_diagnostics, maximize_entropy
from .minimize import MinResult, brute_force_min, minimize_entropy
from .pipeline import (
    BatchConfig,
    BatchSummary,
    InstanceReport,
    emit_heatmap,
    kendall_tau,
    run_batch,
)
from .pwl import BreakpointGrid, LambdaMap, build_lambda_lp, init_breakpoints
from .simplex import LpProblem, LpSolution, solve_lp
from .sos2 import MilpResult, solve_sos2_milp

__version__ = "0.1.0"

__all__ = [
    "BatchConfig",
    "BatchSummary",
    "BreakpointGrid",
    "ContingencyTable",
    "EntroboundError",
    "InstanceReport",
    "JointDistribution",
    "LambdaMap",
    "LpProblem",
    "LpSolution",
    "MarginalMismatchError",
    "MarginalPair",
    "MaxResult",
    "MilpResult",
    "MinResult",
    "ParseError",
    "ReducedInstance",
    "TrivialInstanceError",
    "ValidationError",
    "analytic_max",
    "brute_force_min",
    "build_lambda_lp",
    "emit_heatmap",
    "entropy",
    "eta_bound",
    "h_point",
    "init_breakpoints",
    "kendall_tau",
    "kkt_diagnostics",
    "load_dataset",
    "marginal_entropy",
    "marginals_of",
    "maximize_entropy",
    "mi_ratio",
    "minimize_entropy",
    "mutual_information",
    "parse_table",
    "product_joint",
    "reduce_table",
    "run_batch",
    "solve_lp",
    "solve_sos2_milp",
    "synth_dataset",
]
