import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairthresh.data import Cohort, Individual
from fairthresh.optimize import optimize_unconstrained
from fairthresh.rules import (
    GLOBAL,
    GROUP,
    GROUP_STRATUM,
    ConstraintSpec,
    ThresholdRule,
    apply_rule,
    constraint_residual,
    detention_rate,
    false_positive_rate,
    feasibility_slack,
    immediate_utility,
)


def make_cohort(groups, outcomes=None, strata=None):
    outcomes = outcomes if outcomes is not None else [0] * len(groups)
    strat = "s" if strata is not None else None
    inds = tuple(
        Individual(f"p{i}", (), g, y, strata[i] if strata is not None else None)
        for i, (g, y) in enumerate(zip(groups, outcomes))
    )
    return Cohort(inds, (), (), strat)


def test_extreme_rules():
    c = make_cohort(["a", "b", "a"])
    s = [0.2, 0.0, 1.0]
    assert apply_rule(ThresholdRule(GLOBAL, {"*": (0.0, 1.0)}), c, s).detain.tolist() == [1, 1, 1]
    assert apply_rule(ThresholdRule(GLOBAL, {"*": (1.0, 0.0)}), c, s).detain.tolist() == [0, 0, 0]


def test_tie_resolution_per_seed():
    c = make_cohort(["a"] * 5)
    s = [0.9, 0.7, 0.5, 0.3, 0.1]
    outcomes = set()
    for seed in range(40):
        rule = ThresholdRule(GLOBAL, {"*": (0.5, 0.5)}, tie_seed=seed)
        first = apply_rule(rule, c, s).detain.tolist()
        assert first == apply_rule(rule, c, s).detain.tolist()
        assert first[:2] == [1, 1] and first[3:] == [0, 0]
        outcomes.add(first[2])
    assert outcomes == {0, 1}


def test_missing_cell_is_an_error():
    c = make_cohort(["a", "b"])
    with pytest.raises(KeyError):
        apply_rule(ThresholdRule(GROUP, {"a": (0.5, 0.0)}), c, [0.1, 0.9])


def test_rule_kind_invariants_and_text_roundtrip():
    with pytest.raises(ValueError):
        ThresholdRule(GROUP, {"a|x": (0.5, 0.0)})
    with pytest.raises(ValueError):
        ThresholdRule(GROUP_STRATUM, {"a": (0.5, 0.0)})
    with pytest.raises(ValueError):
        ThresholdRule(GLOBAL, {"*": (0.5, 1.5)})
    r = ThresholdRule(GROUP_STRATUM, {"a|0": (1 / 3, 0.1 + 0.2), "b|5+": (0.7, 0.0)}, tie_seed=42)
    assert ThresholdRule.from_text(r.to_text()) == r


def test_immediate_utility():
    s = [0.9, 0.6, 0.3, 0.1]
    assert immediate_utility([0, 0, 0, 0], s, 0.5) == 0
    assert immediate_utility([1, 1, 1, 1], s, float(np.mean(s))) == pytest.approx(0, abs=1e-12)
    assert immediate_utility([1, 1, 0, 0], s, 0.5) == pytest.approx(0.125, abs=1e-15)
    assert immediate_utility([1, 1, 0, 0], s, 0.5, outcomes=[1, 0, 1, 0]) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        immediate_utility([1], [0.5], 1.0)


def test_detention_rates():
    g = ["a", "a", "a", "b", "b", "b"]
    assert detention_rate([1, 0, 0, 0, 1, 0], GROUP, g) == {"a": 1 / 3, "b": 1 / 3}
    assert detention_rate([1] * 6, GROUP, g) == {"a": 1.0, "b": 1.0}
    strata = ["x", "y", "y", "x", "x", "x"]
    rates = detention_rate([1, 0, 1, 0, 1, 0], GROUP_STRATUM, g, strata)
    assert rates == {"a|x": 1.0, "a|y": 0.5, "b|x": 1 / 3}


def test_false_positive_rates_by_hand():
    g = ["a", "a", "a", "b", "b", "b"]
    y = [0, 0, 1, 0, 1, 1]
    p = [0.2, 0.5, 0.8, 0.4, 0.6, 0.9]
    d = [1, 0, 1, 1, 0, 1]
    assert false_positive_rate(d, "empirical", groups=g, outcomes=y) == {"a": 0.5, "b": 1.0}
    # innocent mass a: .8 + .5 + .2 = 1.5, detained .8 + .2 = 1.0; b: .6 + .4 + .1 = 1.1, detained .6 + .1
    exp = false_positive_rate(d, "expected", scores=p, groups=g)
    assert exp["a"] == pytest.approx(1.0 / 1.5, abs=1e-15)
    assert exp["b"] == pytest.approx(0.7 / 1.1, abs=1e-15)
    for mode in ("empirical", "expected"):
        assert set(false_positive_rate([0] * 6, mode, scores=p, groups=g, outcomes=y).values()) == {0.0}


def test_empirical_fpr_undefined_without_negatives():
    out = false_positive_rate([1, 0, 1], "empirical", groups=["a", "a", "b"], outcomes=[0, 0, 1])
    assert out["a"] == 0.5 and math.isnan(out["b"])


def test_constraint_residuals():
    sp = ConstraintSpec("statistical_parity", 0.3)
    g = ["a"] * 50 + ["b"] * 50
    d = [1] * 20 + [0] * 30 + [1] * 9 + [0] * 41
    assert constraint_residual(d, sp, groups=g) == pytest.approx(0.22)
    assert constraint_residual([1, 0, 1, 0], sp, groups=["a", "a", "b", "b"]) == 0
    assert constraint_residual(d, ConstraintSpec("unconstrained"), groups=g) == 0
    csp = ConstraintSpec("conditional_statistical_parity", 0.3, stratifier="s")
    gg = ["a", "a", "b", "b", "a", "b", "b"]
    ss = ["x", "x", "x", "x", "y", "y", "y"]
    dd = [1, 0, 1, 1, 1, 0, 1]
    # stratum x: a 1/2, b 1 -> 0.5; stratum y: a 1, b 1/2 -> 0.5
    assert constraint_residual(dd, csp, groups=gg, strata=ss) == pytest.approx(0.5)
    dd2 = [1, 1, 1, 1, 1, 0, 0]
    assert constraint_residual(dd2, csp, groups=gg, strata=ss) == pytest.approx(1.0)


def test_constraint_spec_validation():
    with pytest.raises(ValueError):
        ConstraintSpec("equalized_odds")
    with pytest.raises(ValueError):
        ConstraintSpec("statistical_parity", 1.0)
    with pytest.raises(ValueError):
        ConstraintSpec("statistical_parity", 0.3, -0.1)
    with pytest.raises(ValueError):
        ConstraintSpec("conditional_statistical_parity", 0.3)


def test_feasibility_slack():
    spec = ConstraintSpec("statistical_parity")
    assert feasibility_slack(spec, [0.5] * 5, ["a", "a", "b", "b", "b"]) == 0.5
    pe = ConstraintSpec("predictive_equality")
    assert feasibility_slack(pe, [0.5, 0.9, 0.2], ["a", "a", "b"]) == pytest.approx(1.0)
    assert feasibility_slack(pe, [0.5, 0.9, 0.2, 0.6], ["a", "a", "b", "b"]) == pytest.approx(0.5 / 0.6)


score_lists = st.lists(st.integers(0, 10).map(lambda v: v / 10), min_size=2, max_size=12)


@settings(max_examples=150, deadline=None)
@given(score_lists, st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.5), st.integers(0, 1000))
def test_apply_rule_monotone_in_threshold(scores, t, phi, bump, seed):
    c = make_cohort(["a"] * len(scores))
    low = apply_rule(ThresholdRule(GLOBAL, {"*": (t, phi)}, seed), c, scores).detain
    high = apply_rule(ThresholdRule(GLOBAL, {"*": (min(1.0, t + bump), phi)}, seed), c, scores).detain
    assert np.all(high <= low)


@settings(max_examples=100, deadline=None)
@given(score_lists, st.floats(0, 1), st.sampled_from([0.0, 1.0]))
def test_integral_phi_is_deterministic(scores, t, phi):
    c = make_cohort(["a"] * len(scores))
    a = apply_rule(ThresholdRule(GLOBAL, {"*": (t, phi)}, 1), c, scores)
    b = apply_rule(ThresholdRule(GLOBAL, {"*": (t, phi)}, 99), c, scores)
    assert np.array_equal(a.detain, b.detain)
    assert np.array_equal(a.detain, a.mass)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=2, max_size=20), st.lists(st.floats(0, 1), min_size=20, max_size=20),
       st.randoms(use_true_random=False))
def test_expected_fpr_permutation_invariant(p, d, rnd):
    n = len(p)
    d = d[:n]
    g = ["a" if i % 3 else "b" for i in range(n)]
    base = false_positive_rate(d, "expected", scores=p, groups=g)
    for grp in ("a", "b"):
        idx = [i for i in range(n) if g[i] == grp]
        perm = idx[:]
        rnd.shuffle(perm)
        p2, d2 = list(p), list(d)
        for src, dst in zip(idx, perm):
            p2[dst], d2[dst] = p[src], d[src]
        out = false_positive_rate(d2, "expected", scores=p2, groups=g)
        assert out == pytest.approx(base, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 99).map(lambda v: v / 100), min_size=2, max_size=12), st.data())
def test_unconstrained_beats_every_same_size_subset(scores, data):
    n = len(scores)
    k = data.draw(st.integers(1, n - 1))
    res = optimize_unconstrained(scores, alpha=k / n, groups=["a"] * n)
    c = make_cohort(["a"] * n)
    u_rule = immediate_utility(apply_rule(res.rule, c, scores).mass, scores, 0.5)
    best = max(immediate_utility(np.isin(np.arange(n), sub).astype(float), scores, 0.5)
               for sub in combinations(range(n), k))
    assert u_rule >= best - 1e-12
    assert abs(res.mass.sum() / n - k / n) <= 1 / n
