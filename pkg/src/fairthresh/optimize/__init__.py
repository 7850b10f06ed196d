from .bijection import BudgetCostMap, budget_from_cost, cost_from_budget
from .oracle import InstanceTooLarge, brute_force_oracle
from .thresholds import (
    OptimizationError,
    OptimizeResult,
    SortedCell,
    optimize,
    optimize_cond_stat_parity,
    optimize_pred_equality,
    optimize_stat_parity,
    optimize_unconstrained,
    solve_relaxed_lp,
)

__all__ = [
    "BudgetCostMap",
    "InstanceTooLarge",
    "OptimizationError",
    "OptimizeResult",
    "SortedCell",
    "brute_force_oracle",
    "budget_from_cost",
    "cost_from_budget",
    "optimize",
    "optimize_cond_stat_parity",
    "optimize_pred_equality",
    "optimize_stat_parity",
    "optimize_unconstrained",
    "solve_relaxed_lp",
]
