"""Correspondence between a detention cost c and a detention budget alpha.

Detaining everyone whose risk is at least c detains a fraction f(c) of the
population; conversely the budget-alpha rule's marginal detainee has risk
f^{-1}(alpha).
"""

from __future__ import annotations

import math

import numpy as np


class BudgetCostMap:
    def __init__(self, scores):
        s = np.sort(np.asarray(scores, dtype=float))
        if s.size == 0:
            raise ValueError("need at least one score")
        self.ascending = s
        self.n = s.size

    def budget(self, c: float) -> float:
        """Fraction of scores >= c."""
        if not 0 < c < 1:
            raise ValueError("cost c must lie in (0,1)")
        below = np.searchsorted(self.ascending, c, side="left")
        return float((self.n - below) / self.n)

    def cost(self, alpha: float) -> float:
        """Score of the marginal detainee when detaining ceil(alpha * n)."""
        if not 0 < alpha <= 1:
            raise ValueError("budget alpha must lie in (0,1]")
        k = max(1, math.ceil(alpha * self.n - 1e-9))
        return float(self.ascending[self.n - k])


def budget_from_cost(scores, c: float) -> float:
    return BudgetCostMap(scores).budget(c)


def cost_from_budget(scores, alpha: float) -> float:
    return BudgetCostMap(scores).cost(alpha)
