"""Threshold decision rules and the fairness/utility functionals over them.

A rule maps each cell (the whole population, a group, or a group x
stratum) to a threshold ``t`` and a marginal fraction ``phi``: scores above
``t`` are detained, scores below are released, and scores exactly equal to
``t`` are detained with probability ``phi``.

Functionals accept either a `DecisionOutcome` (realized 0/1 decisions) or a
plain array of detention probabilities in [0, 1].
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Cohort

GLOBAL = "global"
GROUP = "group"
GROUP_STRATUM = "group_stratum"
CELL_KINDS = (GLOBAL, GROUP, GROUP_STRATUM)
GLOBAL_KEY = "*"

UNCONSTRAINED = "unconstrained"
STATISTICAL_PARITY = "statistical_parity"
CONDITIONAL_STATISTICAL_PARITY = "conditional_statistical_parity"
PREDICTIVE_EQUALITY = "predictive_equality"
CONSTRAINT_KINDS = (UNCONSTRAINED, STATISTICAL_PARITY, CONDITIONAL_STATISTICAL_PARITY, PREDICTIVE_EQUALITY)


def cell_key(kind: str, group: str | None = None, stratum: str | None = None) -> str:
    if kind == GLOBAL:
        return GLOBAL_KEY
    if kind == GROUP:
        return str(group)
    if kind == GROUP_STRATUM:
        return f"{group}|{stratum}"
    raise ValueError(f"unknown cell kind {kind!r}")


def cell_keys(kind: str, groups, strata=None) -> np.ndarray:
    groups = np.asarray(groups, dtype=object)
    if kind == GLOBAL:
        return np.full(len(groups), GLOBAL_KEY, dtype=object)
    if kind == GROUP:
        return groups.astype(str).astype(object)
    if strata is None:
        raise ValueError("group x stratum cells need strata")
    return np.array([f"{g}|{s}" for g, s in zip(groups, strata)], dtype=object)


@dataclass(frozen=True)
class ThresholdRule:
    kind: str
    cells: Mapping[str, tuple[float, float]]
    tie_seed: int = 0

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        for key, (t, phi) in self.cells.items():
            if not 0.0 <= phi <= 1.0:
                raise ValueError(f"cell {key}: marginal fraction {phi} outside [0,1]")
            if self.kind == GLOBAL and key != GLOBAL_KEY:
                raise ValueError("a global rule has exactly one cell, keyed '*'")
            if self.kind == GROUP and "|" in key:
                raise ValueError(f"group rule cannot hold group x stratum cell {key!r}")
            if self.kind == GROUP_STRATUM and "|" not in key:
                raise ValueError(f"group x stratum rule cannot hold cell {key!r}")

    def keys_for(self, cohort: Cohort) -> np.ndarray:
        return cell_keys(self.kind, cohort.groups, cohort.strata if self.kind == GROUP_STRATUM else None)

    def detention_mass(self, scores, keys) -> np.ndarray:
        """Detention probability per individual (phi at the boundary)."""
        s = np.asarray(scores, dtype=float)
        missing = set(np.asarray(keys).tolist()) - set(self.cells)
        if missing:
            raise KeyError(f"no cell for {sorted(missing)} in rule")
        t = np.array([self.cells[k][0] for k in keys], dtype=float)
        phi = np.array([self.cells[k][1] for k in keys], dtype=float)
        return np.where(s > t, 1.0, np.where(s < t, 0.0, phi))

    def to_text(self) -> str:
        lines = ["cell\tthreshold\tmarginal_fraction\ttie_seed"]
        for key in sorted(self.cells):
            t, phi = self.cells[key]
            lines.append(f"{key}\t{t:.17g}\t{phi:.17g}\t{self.tie_seed}")
        return f"# kind {self.kind}\n" + "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ThresholdRule":
        kind = None
        cells = {}
        seed = 0
        for line in text.splitlines():
            if line.startswith("# kind"):
                kind = line.split()[-1]
                continue
            if not line.strip() or line.startswith("#") or line.startswith("cell\t"):
                continue
            key, t, phi, seed = line.split("\t")[:4]
            cells[key] = (float(t), float(phi))
        if kind is None:
            raise ValueError("rule text lacks '# kind' header")
        return cls(kind, cells, int(seed))


def tie_uniforms(tie_seed: int, ids: Sequence) -> np.ndarray:
    """Deterministic U[0,1) per (tie_seed, id)."""
    out = np.empty(len(ids))
    for i, ident in enumerate(ids):
        h = hashlib.blake2b(f"{tie_seed}:{ident}".encode(), digest_size=8).digest()
        out[i] = int.from_bytes(h, "big") / 2.0 ** 64
    return out


@dataclass(frozen=True)
class DecisionOutcome:
    detain: np.ndarray  # realized 0/1
    mass: np.ndarray  # detention probability before tie resolution
    keys: np.ndarray
    rule: ThresholdRule | None = None
    groups: np.ndarray | None = None
    strata: np.ndarray | None = None
    outcomes: np.ndarray | None = None
    ids: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.detain)


def apply_rule(rule: ThresholdRule, cohort: Cohort, scores) -> DecisionOutcome:
    scores = np.asarray(scores, dtype=float)
    if len(scores) != len(cohort):
        raise ValueError("one score per individual required")
    keys = rule.keys_for(cohort)
    missing = sorted(set(keys.tolist()) - set(rule.cells))
    if missing:
        raise KeyError(f"individuals fall in cells with no threshold: {missing}")
    mass = rule.detention_mass(scores, keys)
    detain = (mass >= 1.0).astype(np.int64)
    marginal = np.flatnonzero((mass > 0) & (mass < 1))
    if marginal.size:
        u = tie_uniforms(rule.tie_seed, cohort.ids[marginal])
        detain[marginal] = (u < mass[marginal]).astype(np.int64)
    return DecisionOutcome(detain, mass, keys, rule, cohort.groups, cohort.strata, cohort.outcomes, cohort.ids)


def _vector(decisions, expected: bool = False) -> np.ndarray:
    if isinstance(decisions, DecisionOutcome):
        return (decisions.mass if expected else decisions.detain).astype(float)
    return np.asarray(decisions, dtype=float)


def immediate_utility(decisions, scores, c: float, outcomes=None) -> float:
    """Mean of d * (score - c); with ``outcomes`` the outcome replaces the score."""
    if not 0 < c < 1:
        raise ValueError("detention cost c must lie in (0,1)")
    d = _vector(decisions)
    benefit = np.asarray(outcomes if outcomes is not None else scores, dtype=float)
    return float(np.mean(d * (benefit - c)))


def _cell_labels(by: str, groups, strata) -> np.ndarray:
    return cell_keys(by, groups, strata)


def detention_rate(decisions, by: str = GROUP, groups=None, strata=None, expected: bool = False) -> dict[str, float]:
    """Fraction detained per cell; cells with no members are absent."""
    d = _vector(decisions, expected)
    if isinstance(decisions, DecisionOutcome):
        groups = decisions.groups if groups is None else groups
        strata = decisions.strata if strata is None else strata
    if groups is None:
        groups = np.full(len(d), GLOBAL_KEY, dtype=object)
    labels = _cell_labels(by, groups, strata)
    return {k: float(d[labels == k].mean()) for k in sorted(set(labels.tolist()))}


def false_positive_rate(
    decisions,
    mode: str = "empirical",
    scores=None,
    groups=None,
    outcomes=None,
    expected_decisions: bool = False,
) -> dict[str, float]:
    """Per-group false positive rate.

    ``empirical``: share detained among outcome-0 members (nan when a group
    has none). ``expected``: sum d*(1-p) / sum (1-p), the score-weighted
    innocent-mass ratio.
    """
    d = _vector(decisions, expected_decisions)
    if isinstance(decisions, DecisionOutcome):
        groups = decisions.groups if groups is None else groups
        outcomes = decisions.outcomes if outcomes is None else outcomes
    groups = np.asarray(groups, dtype=object)
    out = {}
    for g in sorted(set(groups.tolist())):
        m = groups == g
        if mode == "empirical":
            if outcomes is None:
                raise ValueError("empirical FPR needs outcomes")
            neg = m & (np.asarray(outcomes) == 0)
            out[g] = float(d[neg].mean()) if neg.any() else float("nan")
        elif mode == "expected":
            if scores is None:
                raise ValueError("expected FPR needs scores")
            w = 1.0 - np.asarray(scores, dtype=float)[m]
            out[g] = float((d[m] * w).sum() / w.sum()) if w.sum() > 0 else float("nan")
        else:
            raise ValueError(f"unknown FPR mode {mode!r}")
    return out


@dataclass(frozen=True)
class ConstraintSpec:
    kind: str
    budget: float = 0.3
    slack: float = 0.0
    stratifier: str | None = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if not 0 < self.budget < 1:
            raise ValueError("budget must lie in (0,1)")
        if self.slack < 0:
            raise ValueError("slack must be nonnegative")
        if self.kind == CONDITIONAL_STATISTICAL_PARITY and self.stratifier is None:
            raise ValueError("conditional statistical parity needs a stratifier")

    @property
    def cell_kind(self) -> str:
        return {
            UNCONSTRAINED: GLOBAL,
            STATISTICAL_PARITY: GROUP,
            PREDICTIVE_EQUALITY: GROUP,
            CONDITIONAL_STATISTICAL_PARITY: GROUP_STRATUM,
        }[self.kind]


def _max_gap(values) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(max(vals) - min(vals)) if len(vals) > 1 else 0.0


def constraint_residual(decisions, spec: ConstraintSpec, scores=None, strata=None, groups=None,
                        expected: bool = False) -> float:
    """Largest pairwise gap across groups in the constrained functional.

    Statistical parity: detention rate. Conditional: detention rate within
    each stratum, maximized over strata. Predictive equality: expected-mode
    FPR. Zero for the unconstrained spec.
    """
    if spec.kind == UNCONSTRAINED:
        return 0.0
    d = _vector(decisions, expected)
    if isinstance(decisions, DecisionOutcome):
        groups = decisions.groups if groups is None else groups
        strata = decisions.strata if strata is None else strata
    groups = np.asarray(groups, dtype=object)
    if spec.kind == STATISTICAL_PARITY:
        return _max_gap(detention_rate(d, GROUP, groups).values())
    if spec.kind == PREDICTIVE_EQUALITY:
        return _max_gap(false_positive_rate(d, "expected", scores, groups).values())
    if strata is None:
        raise ValueError("conditional statistical parity needs strata")
    strata = np.asarray(strata, dtype=object)
    gap = 0.0
    for s in sorted(set(strata.tolist())):
        m = strata == s
        gap = max(gap, _max_gap(detention_rate(d[m], GROUP, groups[m]).values()))
    return gap


def feasibility_slack(spec: ConstraintSpec, scores, groups, strata=None) -> float:
    """Largest functional change a single individual's decision can cause.

    Rate constraints: 1 / smallest cell size. Predictive equality: largest
    (1 - p_i) / group innocent mass.
    """
    groups = np.asarray(groups, dtype=object)
    if spec.kind == UNCONSTRAINED:
        return 0.0
    if spec.kind == PREDICTIVE_EQUALITY:
        w = 1.0 - np.asarray(scores, dtype=float)
        return max(float(w[groups == g].max() / w[groups == g].sum()) for g in set(groups.tolist()))
    labels = cell_keys(GROUP if spec.kind == STATISTICAL_PARITY else GROUP_STRATUM, groups, strata)
    _, counts = np.unique(labels, return_counts=True)
    return float(1.0 / counts.min())


def save_rule(rule: ThresholdRule, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(rule.to_text())
