"""Shared fixtures-as-functions for the test modules."""

import os
from itertools import combinations

import numpy as np

BROWARD_CSV = os.environ.get("FAIRTHRESH_BROWARD_CSV", "/root/data/compas-scores-two-years.csv")
KINDS = ("unconstrained", "statistical_parity", "predictive_equality", "conditional_statistical_parity")


def have_broward() -> bool:
    return os.path.isfile(BROWARD_CSV)


def random_instance(rng, n_max=20):
    """Small two-group, two-stratum instance with coarse (tie-prone) scores."""
    n = int(rng.integers(4, n_max + 1))
    scores = np.round(rng.random(n), 2) * 0.98 + 0.01
    groups = np.array(["a", "b"], dtype=object)[rng.integers(0, 2, n)]
    groups[0], groups[1] = "a", "b"
    strata = np.array(["x", "y"], dtype=object)[rng.integers(0, 2, n)]
    outcomes = (rng.random(n) < scores).astype(int)
    alpha = float(rng.uniform(0.05, 0.95))
    return scores, groups, strata, outcomes, alpha


def misordered_pairs(scores, mass, keys) -> int:
    """Pairs in one cell where a lower score gets detention mass while a
    strictly higher score is not fully detained."""
    bad = 0
    for k in set(keys.tolist()):
        idx = np.flatnonzero(keys == k)
        for i, j in combinations(idx, 2):
            lo, hi = (i, j) if scores[i] < scores[j] else (j, i)
            if scores[lo] < scores[hi] and mass[lo] > 1e-12 and mass[hi] < 1 - 1e-12:
                bad += 1
    return bad


def pair_auc(scores, outcomes) -> float:
    """O(n^2) pair enumeration."""
    pos = [s for s, y in zip(scores, outcomes) if y == 1]
    neg = [s for s, y in zip(scores, outcomes) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))
