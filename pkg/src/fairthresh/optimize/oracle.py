"""Exhaustive search for small instances, used to certify the fast optimizers.

Threshold mode enumerates, for every cell, each observed score as the
boundary value (everything above detained, everything below released).
For a fixed choice of boundaries the objective and every constraint are
linear in the per-cell marginal fractions, so the best fractions are found
exactly by enumerating the vertices of that small polytope, or, with a
``resolution``, by scanning a grid of fractions. Subset mode enumerates
every detention set of the budgeted size.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from ..rules import (
    GROUP,
    GROUP_STRATUM,
    PREDICTIVE_EQUALITY,
    UNCONSTRAINED,
    ConstraintSpec,
    ThresholdRule,
    cell_keys,
    constraint_residual,
)
from .thresholds import OptimizeResult, _population

MAX_SUBSET_N = 24
MAX_COMBINATIONS = 10_000
TOL = 1e-9


class InstanceTooLarge(ValueError):
    pass


def _infeasible(flags=("infeasible",)) -> OptimizeResult:
    nan = float("nan")
    return OptimizeResult(None, nan, nan, nan, None, feasible=False, flags=tuple(flags))


def brute_force_oracle(scores, cohort=None, spec: ConstraintSpec | None = None, resolution: int | None = None, *,
                       mode: str = "threshold", slack: float = 0.0, groups=None, strata=None) -> OptimizeResult:
    """Best feasible rule by enumeration; ``feasible=False`` when none exists."""
    if spec is None:
        raise ValueError("spec is required")
    pop = _population(scores, cohort, groups, strata)
    if mode == "subset":
        return _subset_search(pop, spec, slack)
    if mode != "threshold":
        raise ValueError(f"unknown oracle mode {mode!r}")
    return _threshold_search(pop, spec, resolution, slack)


def _subset_search(pop, spec, slack) -> OptimizeResult:
    n = pop.n
    if n > MAX_SUBSET_N:
        raise InstanceTooLarge(f"subset mode limited to n <= {MAX_SUBSET_N}, got {n}")
    k_real = spec.budget * n
    k = round(k_real)
    if abs(k - k_real) > TOL:
        raise ValueError("subset mode needs an integer detention count alpha * n")
    best, best_d = -math.inf, None
    for chosen in itertools.combinations(range(n), k):
        d = np.zeros(n)
        d[list(chosen)] = 1.0
        if constraint_residual(d, spec, pop.scores, pop.strata, pop.groups) > spec.slack + slack + TOL:
            continue
        val = float(pop.scores[list(chosen)].sum())
        if val > best + 1e-15:
            best, best_d = val, d
    if best_d is None:
        return _infeasible()
    res = constraint_residual(best_d, spec, pop.scores, pop.strata, pop.groups)
    return OptimizeResult(None, float(k / n), res, best / n, best_d, info={"mode": "subset"})


class _CellChoices:
    """Per boundary level: statistics of members above it and tied at it."""

    def __init__(self, scores):
        s = np.sort(np.asarray(scores, dtype=float))[::-1]
        vals, counts = np.unique(s, return_counts=True)
        self.values, self.tied = vals[::-1], counts[::-1].astype(float)
        self.above = np.concatenate([[0.0], np.cumsum(self.tied)[:-1]])
        self.above_mass = np.concatenate([[0.0], np.cumsum(self.tied * self.values)[:-1]])
        self.above_innocent = np.concatenate([[0.0], np.cumsum(self.tied * (1 - self.values))[:-1]])
        self.n = s.size
        self.innocent = float((1 - s).sum())


def _threshold_search(pop, spec: ConstraintSpec, resolution, slack) -> OptimizeResult:
    kind = spec.cell_kind
    keys = cell_keys(kind, pop.groups, pop.strata if kind == GROUP_STRATUM else None)
    cell_names = sorted(set(keys.tolist()))
    cells = [_CellChoices(pop.scores[keys == k]) for k in cell_names]
    m = len(cells)
    n_combos = math.prod(len(c.values) for c in cells)
    if n_combos > MAX_COMBINATIONS:
        raise InstanceTooLarge(f"{n_combos} threshold combinations exceed {MAX_COMBINATIONS}")
    grid = np.indices([len(c.values) for c in cells]).reshape(m, -1).T  # (C, m)
    C = grid.shape[0]

    def gather(attr):
        return np.stack([getattr(c, attr)[grid[:, j]] for j, c in enumerate(cells)], axis=1)

    tied, above = gather("tied"), gather("above")
    value = gather("values")
    above_mass = gather("above_mass")
    above_innocent = gather("above_innocent")

    # functional f_j = base_j + slope_j * phi_j for each constrained cell
    if spec.kind == PREDICTIVE_EQUALITY:
        denom = np.array([c.innocent for c in cells])
        base = above_innocent / denom
        slope = tied * (1 - value) / denom
    else:
        denom = np.array([c.n for c in cells], dtype=float)
        base = above / denom
        slope = tied / denom

    sets = _cell_sets(cell_names, spec)
    eq_rows, eq_rhs, ub_rows, ub_rhs = [], [], [], []
    eq_rows.append(tied)
    eq_rhs.append(spec.budget * pop.n - above.sum(axis=1))
    bound = spec.slack + slack
    for members in sets:
        for a, b in itertools.combinations(members, 2):
            row = np.zeros((C, m))
            row[:, a] = slope[:, a]
            row[:, b] = -slope[:, b]
            rhs = base[:, b] - base[:, a]
            if bound == 0:
                eq_rows.append(row)
                eq_rhs.append(rhs)
            else:
                ub_rows += [row, -row]
                ub_rhs += [rhs + bound, -rhs + bound]
    for j in range(m):
        e = np.zeros((C, m))
        e[:, j] = 1.0
        ub_rows += [e, -e]
        ub_rhs += [np.ones(C), np.zeros(C)]

    E = np.stack(eq_rows, axis=1)  # (C, nE, m)
    bE = np.stack(eq_rhs, axis=1)
    U = np.stack(ub_rows, axis=1)
    bU = np.stack(ub_rhs, axis=1)
    gain = tied * value
    const = above_mass.sum(axis=1)

    if resolution is None:
        phi, ok = _vertex_search(E, bE, U, bU, gain, const)
    else:
        phi, ok = _grid_search(E, bE, U, bU, gain, const, resolution, m)
    if not ok.any():
        return _infeasible()
    totals = np.where(ok, const + (gain * np.nan_to_num(phi)).sum(axis=1), -np.inf)
    best = int(np.argmax(totals))
    phi_best = np.clip(phi[best], 0.0, 1.0)
    rule_cells = {}
    for j, name in enumerate(cell_names):
        v = float(value[best, j])
        rule_cells[name] = (v, float(phi_best[j]))
    rule = ThresholdRule(kind, rule_cells)
    mass = rule.detention_mass(pop.scores, keys)
    residual = constraint_residual(mass, spec, pop.scores, pop.strata, pop.groups)
    return OptimizeResult(rule, float(mass.sum() / pop.n), residual, float(totals[best] / pop.n), mass,
                          info={"mode": "threshold", "combinations": C})


def _cell_sets(cell_names, spec) -> list[list[int]]:
    if spec.kind == UNCONSTRAINED:
        return []
    if spec.cell_kind == GROUP:
        return [list(range(len(cell_names)))]
    by_stratum: dict[str, list[int]] = {}
    for j, name in enumerate(cell_names):
        by_stratum.setdefault(name.split("|", 1)[1], []).append(j)
    return list(by_stratum.values())


def _feasible(phi, E, bE, U, bU):
    eq_ok = np.all(np.abs(np.einsum("crm,cm->cr", E, phi) - bE) <= TOL * (1 + np.abs(bE)), axis=1)
    ub_ok = np.all(np.einsum("crm,cm->cr", U, phi) <= bU + TOL, axis=1)
    return eq_ok & ub_ok


def _vertex_search(E, bE, U, bU, gain, const):
    C, nE, m = E.shape
    free = m - nE
    best_val = np.full(C, -np.inf)
    best_phi = np.full((C, m), np.nan)
    if free < 0:
        raise ValueError("more equality constraints than marginal fractions")
    for active in itertools.combinations(range(U.shape[1]), free):
        A = np.concatenate([E, U[:, list(active), :]], axis=1)
        b = np.concatenate([bE, bU[:, list(active)]], axis=1)
        det = np.linalg.det(A)
        nonsing = np.abs(det) > 1e-12
        if not nonsing.any():
            continue
        phi = np.full((C, m), np.nan)
        phi[nonsing] = np.linalg.solve(A[nonsing], b[nonsing][..., None])[..., 0]
        ok = nonsing.copy()
        ok[nonsing] = _feasible(phi[nonsing], E[nonsing], bE[nonsing], U[nonsing], bU[nonsing])
        val = np.where(ok, const + (gain * np.nan_to_num(phi)).sum(axis=1), -np.inf)
        better = val > best_val
        best_val[better] = val[better]
        best_phi[better] = phi[better]
    return best_phi, np.isfinite(best_val)


def _grid_search(E, bE, U, bU, gain, const, resolution, m):
    if resolution < 1:
        raise ValueError("resolution must be a positive integer")
    C = E.shape[0]
    levels = np.arange(resolution + 1) / resolution
    if (resolution + 1) ** m * C > 5_000_000:
        raise InstanceTooLarge("grid too large")
    best_val = np.full(C, -np.inf)
    best_phi = np.full((C, m), np.nan)
    for point in itertools.product(levels, repeat=m):
        phi = np.broadcast_to(np.array(point), (C, m))
        ok = _feasible(phi, E, bE, U, bU)
        val = np.where(ok, const + (gain * phi).sum(axis=1), -np.inf)
        better = val > best_val
        best_val[better] = val[better]
        best_phi[better] = phi[better]
    return best_phi, np.isfinite(best_val)


__all__ = ["InstanceTooLarge", "brute_force_oracle"]
