"""Utility-maximizing threshold rules at a fixed detention budget.

All optimizers work on the empirical score distribution and allow a
fractional detention probability at one boundary score per cell, so the
budget (alpha * n detentions) and the equality constraints are met exactly.
The objective is expected crimes prevented per capita, sum(d_i * p_i) / n.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from ..rules import (
    CONDITIONAL_STATISTICAL_PARITY,
    GLOBAL,
    GLOBAL_KEY,
    GROUP,
    GROUP_STRATUM,
    PREDICTIVE_EQUALITY,
    STATISTICAL_PARITY,
    UNCONSTRAINED,
    ConstraintSpec,
    ThresholdRule,
    cell_keys,
    constraint_residual,
)

log = logging.getLogger(__name__)

SNAP = 1e-9
BISECTION_MAX_ITER = 200
BUDGET_TOL = 1e-10


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizeResult:
    rule: ThresholdRule | None
    achieved_budget: float
    achieved_residual: float
    objective: float
    mass: np.ndarray = field(repr=False, compare=False, default=None)
    feasible: bool = True
    flags: tuple[str, ...] = ()
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def to_text(self) -> str:
        head = (
            f"# achieved_budget {self.achieved_budget:.17g}\n"
            f"# achieved_residual {self.achieved_residual:.17g}\n"
            f"# objective {self.objective:.17g}\n"
            f"# feasible {int(self.feasible)}\n"
        )
        return head + (self.rule.to_text() if self.rule is not None else "")


class SortedCell:
    """Members of one cell sorted by decreasing score, grouped into tie levels.

    Level k has score ``values[k]`` and ``counts[k]`` members; the
    cumulative arrays have a leading zero so index k is the total over
    levels strictly above level k.
    """

    def __init__(self, scores):
        s = np.sort(np.asarray(scores, dtype=float))[::-1]
        self.n = s.size
        if self.n == 0:
            self.values = np.empty(0)
            self.counts = np.empty(0)
        else:
            self.values, counts = np.unique(s, return_counts=True)
            self.values, self.counts = self.values[::-1], counts[::-1].astype(float)
        self.cum_count = np.concatenate([[0.0], np.cumsum(self.counts)])
        self.cum_mass = np.concatenate([[0.0], np.cumsum(self.counts * self.values)])
        self.cum_innocent = np.concatenate([[0.0], np.cumsum(self.counts * (1.0 - self.values))])
        self.innocent_total = float(self.cum_innocent[-1])
        # sorted scores, highest first, for marginal-gain lookups
        self.sorted = s

    def rule_for_count(self, x: float) -> tuple[float, float]:
        """(threshold, marginal fraction) detaining the top ``x`` members."""
        if self.n == 0:
            return (1.0, 0.0)
        x = min(max(x, 0.0), float(self.n))
        if x <= SNAP:
            return (float(self.values[0]), 0.0)
        k = int(np.searchsorted(self.cum_count[1:], x - SNAP, side="left"))
        k = min(k, len(self.values) - 1)
        phi = (x - self.cum_count[k]) / self.counts[k]
        return self._snap(k, phi)

    def rule_for_innocent(self, F: float) -> tuple[float, float]:
        """(threshold, marginal fraction) detaining top members until their
        summed (1 - p) reaches ``F``."""
        if self.n == 0:
            return (1.0, 0.0)
        if F <= 0:
            return (float(self.values[0]), 0.0)
        if F >= self.innocent_total:
            return (float(self.values[-1]), 1.0)
        k = int(np.searchsorted(self.cum_innocent[1:], F, side="left"))
        k = min(k, len(self.values) - 1)
        phi = (F - self.cum_innocent[k]) / (self.counts[k] * (1.0 - self.values[k]))
        return self._snap(k, phi)

    def _snap(self, k: int, phi: float) -> tuple[float, float]:
        if phi >= 1 - SNAP:
            return (float(self.values[k]), 1.0)
        if phi <= SNAP and k > 0:
            return (float(self.values[k - 1]), 1.0)
        return (float(self.values[k]), float(max(phi, 0.0)))

    def count_for_innocent(self, F: float) -> float:
        if self.n == 0 or F <= 0:
            return 0.0
        if F >= self.innocent_total:
            return float(self.n)
        k = int(np.searchsorted(self.cum_innocent[1:], F, side="left"))
        k = min(k, len(self.values) - 1)
        return float(self.cum_count[k] + (F - self.cum_innocent[k]) / (1.0 - self.values[k]))


@dataclass
class _Population:
    scores: np.ndarray
    groups: np.ndarray
    strata: np.ndarray | None

    @property
    def n(self) -> int:
        return len(self.scores)


def _population(scores, cohort=None, groups=None, strata=None) -> _Population:
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("scores must be a nonempty 1-d sequence")
    if not np.all(np.isfinite(s)) or s.min() < 0 or s.max() > 1:
        raise ValueError("scores must lie in [0,1]")
    if cohort is not None:
        groups = cohort.groups if groups is None else groups
        strata = cohort.strata if strata is None else strata
    if groups is None:
        groups = np.full(s.size, GLOBAL_KEY, dtype=object)
    groups = np.asarray(groups, dtype=object)
    if groups.size != s.size:
        raise ValueError("one group label per score required")
    if strata is not None:
        strata = np.asarray(strata, dtype=object)
        if strata.size != s.size:
            raise ValueError("one stratum label per score required")
    return _Population(s, groups, strata)


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise ValueError("budget alpha must lie in (0,1)")


def _finish(pop: _Population, rule: ThresholdRule, spec: ConstraintSpec, flags=(), info=None) -> OptimizeResult:
    keys = cell_keys(rule.kind, pop.groups, pop.strata if rule.kind == GROUP_STRATUM else None)
    mass = rule.detention_mass(pop.scores, keys)
    residual = constraint_residual(mass, spec, pop.scores, pop.strata, pop.groups)
    return OptimizeResult(
        rule,
        achieved_budget=float(mass.sum() / pop.n),
        achieved_residual=residual,
        objective=float((mass * pop.scores).sum() / pop.n),
        mass=mass,
        flags=tuple(flags),
        info=dict(info or {}),
    )


def _group_cells(pop: _Population) -> dict[str, SortedCell]:
    return {g: SortedCell(pop.scores[pop.groups == g]) for g in sorted(set(pop.groups.tolist()))}


def optimize_unconstrained(scores, cohort=None, alpha: float = 0.3, *, tie_seed: int = 0, groups=None) -> OptimizeResult:
    """Single global threshold detaining the top alpha * n scores."""
    _check_alpha(alpha)
    pop = _population(scores, cohort, groups)
    cell = SortedCell(pop.scores)
    flags = ["degenerate_scores"] if len(cell.values) == 1 else []
    rule = ThresholdRule(GLOBAL, {GLOBAL_KEY: cell.rule_for_count(alpha * pop.n)}, tie_seed)
    return _finish(pop, rule, ConstraintSpec(UNCONSTRAINED, alpha), flags)


def optimize_stat_parity(scores, cohort=None, alpha: float = 0.3, *, delta: float = 0.0, tie_seed: int = 0,
                         groups=None) -> OptimizeResult:
    """Per-group thresholds detaining the riskiest alpha share of each group."""
    _check_alpha(alpha)
    pop = _population(scores, cohort, groups)
    spec = ConstraintSpec(STATISTICAL_PARITY, alpha, delta)
    if delta > 0:
        return _optimize_relaxed(pop, spec, tie_seed)
    cells = _group_cells(pop)
    flags = [f"small_group:{g}" for g, c in cells.items() if c.n < 1 / alpha]
    if flags:
        log.warning("groups smaller than 1/alpha: %s", flags)
    rule = ThresholdRule(GROUP, {g: c.rule_for_count(alpha * c.n) for g, c in cells.items()}, tie_seed)
    return _finish(pop, rule, spec, flags)


def _stratum_segments(cells: dict[str, SortedCell], n_stratum: int) -> list[tuple[float, float, float]]:
    """Linear pieces (r_start, r_end, gain per detention) of a stratum's
    common-rate frontier."""
    breaks = {0.0, 1.0}
    for c in cells.values():
        breaks.update(j / c.n for j in range(c.n + 1))
    pts = sorted(breaks)
    segs = []
    for ra, rb in zip(pts[:-1], pts[1:]):
        if rb - ra <= 0:
            continue
        gain = 0.0
        for c in cells.values():
            idx = min(int(np.floor(ra * c.n + 1e-9)), c.n - 1)
            gain += c.n * c.sorted[idx]
        segs.append((ra, rb, gain / n_stratum))
    return segs


def optimize_cond_stat_parity(scores, cohort=None, alpha: float = 0.3, stratifier: str | None = None, *,
                              delta: float = 0.0, tie_seed: int = 0, groups=None, strata=None) -> OptimizeResult:
    """Common detention rate across groups within each stratum; stratum rates
    allocated greedily by marginal gain to meet the overall budget."""
    _check_alpha(alpha)
    pop = _population(scores, cohort, groups, strata)
    if pop.strata is None:
        raise ValueError("conditional statistical parity needs strata")
    stratifier = stratifier or getattr(cohort, "stratifier", None) or "stratum"
    spec = ConstraintSpec(CONDITIONAL_STATISTICAL_PARITY, alpha, delta, stratifier)
    if delta > 0:
        return _optimize_relaxed(pop, spec, tie_seed)

    group_set = sorted(set(pop.groups.tolist()))
    strata = sorted(set(pop.strata.tolist()))
    flags = []
    segments = []
    stratum_cells: dict[str, dict[str, SortedCell]] = {}
    for order, s in enumerate(strata):
        in_s = pop.strata == s
        cells = {}
        for g in group_set:
            m = in_s & (pop.groups == g)
            if m.any():
                cells[g] = SortedCell(pop.scores[m])
            else:
                flags.append(f"empty_cell:{g}|{s}")
        stratum_cells[s] = cells
        n_s = int(in_s.sum())
        for ra, rb, gain in _stratum_segments(cells, n_s):
            segments.append((-gain, order, ra, rb, s, n_s))

    segments.sort(key=lambda t: (t[0], t[1], t[2]))
    rate = {s: 0.0 for s in strata}
    remaining = alpha * pop.n
    for neg_gain, _, ra, rb, s, n_s in segments:
        if remaining <= 1e-12:
            break
        cap = (rb - ra) * n_s
        take = min(cap, remaining)
        rate[s] = rb if take == cap else ra + take / n_s
        remaining -= take

    cells_out = {}
    for s, cells in stratum_cells.items():
        for g, c in cells.items():
            cells_out[f"{g}|{s}"] = c.rule_for_count(rate[s] * c.n)
    rule = ThresholdRule(GROUP_STRATUM, cells_out, tie_seed)
    return _finish(pop, rule, spec, flags, {"stratum_rates": rate})


def optimize_pred_equality(scores, cohort=None, alpha: float = 0.3, *, delta: float = 0.0, tie_seed: int = 0,
                           groups=None) -> OptimizeResult:
    """Per-group thresholds with equal expected false positive rate.

    Bisection on the common rate sigma: each group detains its riskiest
    members until their summed (1 - p) equals sigma times the group's
    innocent mass, and total detentions rise monotonically with sigma.
    """
    _check_alpha(alpha)
    pop = _population(scores, cohort, groups)
    spec = ConstraintSpec(PREDICTIVE_EQUALITY, alpha, delta)
    cells = _group_cells(pop)
    for g, c in cells.items():
        if not c.innocent_total > 0:
            raise ValueError(f"group {g} has no innocent mass (all scores equal 1)")
    if delta > 0:
        return _optimize_relaxed(pop, spec, tie_seed)

    target = alpha * pop.n

    def detained(sigma: float) -> float:
        return sum(c.count_for_innocent(sigma * c.innocent_total) for c in cells.values())

    lo, hi = 0.0, 1.0
    d_lo, d_hi = detained(lo), detained(hi)
    steps = 0
    flags = []
    while steps < BISECTION_MAX_ITER:
        steps += 1
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        d_mid = detained(mid)
        if not d_lo - 1e-9 <= d_mid <= d_hi + 1e-9:
            raise OptimizationError(f"detentions not monotone in sigma at {mid}")
        if d_mid < target:
            lo, d_lo = mid, d_mid
        else:
            hi, d_hi = mid, d_mid
        if d_hi - d_lo <= BUDGET_TOL:
            break
    else:
        flags.append("bisection_not_converged")
    sigma = lo if d_hi == d_lo else lo + (target - d_lo) * (hi - lo) / (d_hi - d_lo)
    sigma = min(max(sigma, lo), hi)
    rule = ThresholdRule(GROUP, {g: c.rule_for_innocent(sigma * c.innocent_total) for g, c in cells.items()},
                         tie_seed)
    res = _finish(pop, rule, spec, flags, {"sigma": sigma, "bisection_steps": steps})
    gap = res.achieved_budget * pop.n - target
    if abs(gap) > 1e-6:
        log.warning("predictive equality budget gap %.3g", gap)
        res = replace(res, flags=res.flags + ("budget_gap",))
    return res


# ---------------------------------------------------------------------------
# relaxed constraints (slack delta > 0): linear program over detention
# probabilities, snapped back to one boundary per cell


def _comparison_sets(pop: _Population, spec: ConstraintSpec) -> list[list[np.ndarray]]:
    """Index sets whose constrained functionals must stay within delta."""
    groups = sorted(set(pop.groups.tolist()))
    if spec.kind in (STATISTICAL_PARITY, PREDICTIVE_EQUALITY):
        return [[np.flatnonzero(pop.groups == g) for g in groups]]
    sets = []
    for s in sorted(set(pop.strata.tolist())):
        members = [np.flatnonzero((pop.strata == s) & (pop.groups == g)) for g in groups]
        sets.append([m for m in members if m.size])
    return sets


def solve_relaxed_lp(pop_or_scores, spec: ConstraintSpec, groups=None, strata=None):
    """Maximize sum(d*p) over d in [0,1]^n with sum(d) = alpha*n and each
    constrained functional within a band of width delta. Returns (d, value)."""
    pop = pop_or_scores if isinstance(pop_or_scores, _Population) else _population(pop_or_scores, None, groups, strata)
    n = pop.n
    sets = [] if spec.kind == UNCONSTRAINED else _comparison_sets(pop, spec)
    n_band = len(sets)
    rows, cols, vals, ub = [], [], [], []
    r = 0
    for b, members in enumerate(sets):
        if len(members) < 2:
            continue
        for idx in members:
            if spec.kind == PREDICTIVE_EQUALITY:
                w = 1.0 - pop.scores[idx]
                coef = w / w.sum()
            else:
                coef = np.full(idx.size, 1.0 / idx.size)
            # f - L <= delta  and  L - f <= 0
            for sign, bound in ((1.0, spec.slack), (-1.0, 0.0)):
                rows += [r] * idx.size + [r]
                cols += idx.tolist() + [n + b]
                vals += (sign * coef).tolist() + [-sign]
                ub.append(bound)
                r += 1
    A_ub = sparse.csr_matrix((vals, (rows, cols)), shape=(r, n + n_band)) if r else None
    A_eq = sparse.csr_matrix(np.concatenate([np.ones(n), np.zeros(n_band)])[None, :])
    c = np.concatenate([-pop.scores, np.zeros(n_band)])
    bounds = [(0.0, 1.0)] * n + [(None, None)] * n_band
    res = linprog(c, A_ub=A_ub, b_ub=np.array(ub) if r else None, A_eq=A_eq, b_eq=[spec.budget * n],
                  bounds=bounds, method="highs-ds")
    if res.status != 0:
        raise OptimizationError(f"relaxed problem not solved: {res.message}")
    d = np.clip(res.x[:n], 0.0, 1.0)
    return d, float(-res.fun / n)


def _optimize_relaxed(pop: _Population, spec: ConstraintSpec, tie_seed: int) -> OptimizeResult:
    d, _ = solve_relaxed_lp(pop, spec)
    cells = {}
    if spec.kind == PREDICTIVE_EQUALITY:
        kind = GROUP
        for g in sorted(set(pop.groups.tolist())):
            m = pop.groups == g
            cells[g] = SortedCell(pop.scores[m]).rule_for_innocent(float((d[m] * (1 - pop.scores[m])).sum()))
    else:
        kind = GROUP if spec.kind == STATISTICAL_PARITY else GROUP_STRATUM
        keys = cell_keys(kind, pop.groups, pop.strata if kind == GROUP_STRATUM else None)
        for key in sorted(set(keys.tolist())):
            m = keys == key
            cells[key] = SortedCell(pop.scores[m]).rule_for_count(float(d[m].sum()))
    return _finish(pop, ThresholdRule(kind, cells, tie_seed), spec, (), {"method": "lp"})


def optimize(scores, cohort, spec: ConstraintSpec, *, tie_seed: int = 0, groups=None, strata=None) -> OptimizeResult:
    """Dispatch on ``spec.kind``."""
    if spec.kind == UNCONSTRAINED:
        return optimize_unconstrained(scores, cohort, spec.budget, tie_seed=tie_seed, groups=groups)
    if spec.kind == STATISTICAL_PARITY:
        return optimize_stat_parity(scores, cohort, spec.budget, delta=spec.slack, tie_seed=tie_seed, groups=groups)
    if spec.kind == PREDICTIVE_EQUALITY:
        return optimize_pred_equality(scores, cohort, spec.budget, delta=spec.slack, tie_seed=tie_seed,
                                      groups=groups)
    return optimize_cond_stat_parity(scores, cohort, spec.budget, spec.stratifier, delta=spec.slack,
                                     tie_seed=tie_seed, groups=groups, strata=strata)
