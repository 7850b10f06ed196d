import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.stats import spearmanr

from fairthresh.data import BetaPopulation, Cohort, Individual, sample_beta_population
from fairthresh.risk import (
    Bins,
    RiskModel,
    auc,
    calibration_curve,
    default_bins,
    fit_risk_model,
    predict_cohort,
    predict_risk,
    wilson_interval,
)
from fairthresh.risk.logistic import (
    fit_l1_logistic,
    fit_logistic_newton,
    lambda_max,
    penalized_objective,
    subgradient_gap,
)
from fairthresh.risk.platt import IDENTITY, fit_platt, platt_transform
from helpers import pair_auc


def toy_overlap(n=40, seed=4):
    """Two features with overlapping classes, so the MLE is finite."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2)) * [1.0, 3.0] + [0.0, 5.0]
    y = (rng.random(n) < 1 / (1 + np.exp(-(0.8 * X[:, 0] - 0.3 * (X[:, 1] - 5))))).astype(float)
    return X, y


def scipy_mle(X, y):
    """Unpenalized MLE by BFGS, an independent route from both solvers under test."""
    A = np.column_stack([np.ones(len(y)), X])

    def f(b):
        z = A @ b
        return np.sum(np.logaddexp(0, z) - y * z), A.T @ (1 / (1 + np.exp(-z)) - y)

    res = minimize(f, np.zeros(A.shape[1]), jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 10_000})
    return res.x


def cohort_from(X, y, groups=None):
    groups = groups if groups is not None else ["g"] * len(y)
    inds = tuple(Individual(str(i), tuple(map(float, X[i])), groups[i], int(y[i])) for i in range(len(y)))
    return Cohort(inds, tuple(f"x{j}" for j in range(X.shape[1])))


# --- AUC -------------------------------------------------------------------


def test_auc_trivial_cases():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_six_pair_fixture():
    s = [0.2, 0.4, 0.4, 0.7, 0.1, 0.9]
    y = [0, 1, 0, 1, 0, 0]
    # positives 0.4, 0.7 vs negatives 0.2, 0.4, 0.1, 0.9: wins 1+0.5+1+0 and 1+1+1+0
    assert auc(s, y) == pytest.approx(5.5 / 8, abs=0)
    assert auc(s, y) == pair_auc(s, y)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 1)), min_size=2, max_size=80))
def test_auc_matches_pair_enumeration(pairs):
    s = [a / 8 for a, _ in pairs]
    y = [b for _, b in pairs]
    if len(set(y)) < 2:
        return
    assert auc(s, y) == pytest.approx(pair_auc(s, y), abs=1e-12)


def test_auc_pair_enumeration_n500():
    rng = np.random.default_rng(0)
    s = np.round(rng.random(500), 2)
    y = rng.integers(0, 2, 500)
    assert auc(s, y) == pytest.approx(pair_auc(s, y), abs=1e-12)


# --- L1 logistic solver ---------------------------------------------------------


def test_unpenalized_fit_matches_independent_mle():
    X, y = toy_overlap()
    ref = scipy_mle(X, y)
    b0, w = fit_logistic_newton(X, y)
    assert np.allclose(np.r_[b0, w], ref, atol=1e-4)
    model = fit_risk_model(cohort_from(X, y), l1_strength=0.0)
    assert np.allclose(model.coefficients, ref, atol=1e-4)


def test_objective_non_increasing_and_kkt():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 5))
    y = (rng.random(300) < 1 / (1 + np.exp(-(X[:, 0] - 0.5 * X[:, 2])))).astype(float)
    lam = 0.2 * lambda_max(X, y)
    res = fit_l1_logistic(X, y, lam)
    assert res.converged
    assert np.all(np.diff(res.history) <= 1e-15)
    assert np.max(subgradient_gap(X, y, res.intercept, res.coef, lam)) < 1e-5
    assert res.objective == pytest.approx(penalized_objective(X, y, res.intercept, res.coef, lam), abs=1e-15)


def test_objective_within_tolerance_of_independent_minimizer():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(200, 3))
    y = (rng.random(200) < 0.4).astype(float)
    lam = 0.01
    res = fit_l1_logistic(X, y, lam)

    # split w = u - v with u, v >= 0 gives a smooth bound-constrained problem
    def f(theta):
        b0, u, v = theta[0], theta[1:4], theta[4:]
        w = u - v
        z = b0 + X @ w
        r = 1 / (1 + np.exp(-z)) - y
        g = X.T @ r / len(y)
        val = np.mean(np.logaddexp(0, z) - y * z) + lam * (u.sum() + v.sum())
        return val, np.r_[r.mean(), g + lam, -g + lam]

    ref = minimize(f, np.zeros(7), jac=True, method="L-BFGS-B", bounds=[(None, None)] + [(0, None)] * 6,
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10_000})
    assert res.objective <= ref.fun + 1e-7


def test_lambda_max_zeroes_slopes():
    X, y = toy_overlap(seed=1)
    res = fit_l1_logistic(X, y, lambda_max(X, y) * 1.0001)
    assert np.all(res.coef == 0)


def test_infinite_penalty_gives_base_rate():
    X, y = toy_overlap()
    m = fit_risk_model(cohort_from(X, y), l1_strength=math.inf)
    assert all(w == 0 for w in m.weights)
    p = predict_cohort(m, cohort_from(X, y))
    assert np.allclose(p, y.mean(), atol=1e-12)


def test_fit_errors():
    X, y = toy_overlap()
    with pytest.raises(ValueError, match="single class"):
        fit_risk_model(cohort_from(X, np.zeros_like(y)), l1_strength=0.1)
    Xbad = X.copy()
    Xbad[0, 0] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        fit_risk_model(cohort_from(Xbad, y), l1_strength=0.1)


def test_cross_validated_fit_is_deterministic():
    X, y = toy_overlap(n=200, seed=7)
    c = cohort_from(X, y)
    a, b = fit_risk_model(c, seed=3), fit_risk_model(c, seed=3)
    assert a.to_text() == b.to_text()
    assert a.l1_strength in a.selection["grid"]
    assert a.uses_race is False


# --- prediction and Platt ----------------------------------------------------------


def test_predict_zero_model_is_half():
    m = RiskModel(("a", "b"), (0.0, 0.0, 0.0), 0.0, IDENTITY)
    assert predict_risk(m, Individual("1", (3.0, -7.0), "g", 0)) == 0.5


def test_predict_hand_computed_fixture():
    m = RiskModel(("age", "priors"), (-1.5, -0.02, 0.3), 0.1, (-1.2, 0.4))
    # linear score -1.5 - 0.02*30 + 0.3*4 = -0.9; Platt: 1/(1+exp(-1.2*-0.9 + 0.4)) = 1/(1+exp(1.48))
    expected = 1 / (1 + math.exp(1.48))
    assert predict_risk(m, Individual("1", (30.0, 4.0), "g", 0)) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError, match="dimension mismatch"):
        predict_risk(m, Individual("2", (30.0,), "g", 0))


@given(st.floats(0, 50), st.floats(0, 30), st.floats(0, 10))
def test_predict_monotone_in_positive_weight(age, priors, bump):
    m = RiskModel(("age", "priors"), (-1.5, -0.02, 0.3), 0.1, (-1.2, 0.4))
    lo = predict_risk(m, Individual("1", (age, priors), "g", 0))
    hi = predict_risk(m, Individual("1", (age, priors + bump), "g", 0))
    assert hi >= lo
    assert 0 < lo < 1


def test_model_text_roundtrip_is_bit_exact(tmp_path):
    m = RiskModel(("a", "b"), (0.1 + 0.2, -1 / 3, 2.0 ** -40), 0.0123, (-1.0000000000000002, 1e-300))
    m.save(tmp_path / "m.txt")
    back = RiskModel.load(tmp_path / "m.txt")
    assert back.coefficients == m.coefficients and back.platt == m.platt
    assert back.l1_strength == m.l1_strength


def test_model_invariants():
    with pytest.raises(ValueError):
        RiskModel(("a",), (0.0,), 0.0)
    with pytest.raises(ValueError):
        RiskModel(("a",), (0.0, 1.0), 0.0, (0.5, 0.0))


def test_platt_preserves_order_and_auc():
    rng = np.random.default_rng(5)
    s = rng.normal(size=400)
    y = (rng.random(400) < 1 / (1 + np.exp(-2 * s))).astype(int)
    A, B = fit_platt(s, y)
    assert A < 0
    p = platt_transform(s, A, B)
    assert spearmanr(s, p).statistic == pytest.approx(1.0)
    assert auc(p, y) == auc(s, y)
    assert fit_platt(np.ones(5), [0, 1, 0, 1, 1]) == IDENTITY


# --- calibration curves --------------------------------------------------------


def test_wilson_interval_contains_rate():
    for k, n in [(0, 10), (10, 10), (3, 7), (50, 100)]:
        lo, hi = wilson_interval(k, n)
        assert lo <= k / n <= hi
    lo, hi = wilson_interval(3, 7)
    # closed form with z = 1.959963984540054
    z = 1.959963984540054
    c = (3 / 7 + z * z / 14) / (1 + z * z / 7)
    h = z * math.sqrt(3 / 7 * 4 / 7 / 7 + z * z / 196) / (1 + z * z / 7)
    assert (lo, hi) == pytest.approx((c - h, c + h), abs=1e-12)


def test_calibration_all_negative_and_empty_bins():
    s = [0.05, 0.15, 0.15, 0.95]
    cur = calibration_curve(s, ["a", "b", "a", "b"], [0, 0, 0, 0])
    occupied = [c for c in cur.cells if not c.empty]
    assert all(c.rate == 0 for c in occupied)
    assert cur.get("[0.5,0.6)", "a").empty
    for g in ("a", "b"):
        assert sum(c.count for c in cur.cells if c.group == g) == 2
    with pytest.raises(ValueError):
        calibration_curve([], [], [])


def test_calibration_true_scores_inside_intervals():
    pop = sample_beta_population(BetaPopulation({"a": (2, 5), "b": (3, 3)}, {"a": 0.5, "b": 0.5}, 50_000), seed=2)
    p = pop.column("risk")
    cur = calibration_curve(p, pop.groups, pop.outcomes)
    cells = [c for c in cur.cells if c.count >= 20]
    inside = [c.lower <= c.mean_score <= c.upper for c in cells]
    assert np.mean(inside) >= 0.9


def test_default_bins():
    assert default_bins([1, 5, 10]).labels == tuple(str(v) for v in range(1, 11))
    assert default_bins([0.1, 0.5]) == Bins.equal_width(10)
    with pytest.raises(ValueError):
        Bins.equal_width(10).assign([1.5])


@pytest.mark.broward
def test_broward_general_label_bin7(broward_path):
    from fairthresh.data import load_broward

    c, _ = load_broward(broward_path, label="any")
    v = c.column("vendor_score")
    cur = calibration_curve(v, c.groups, c.outcomes, default_bins(v))
    assert cur.get("7", "white").rate == pytest.approx(0.60, abs=0.01)
    assert cur.get("7", "black").rate == pytest.approx(0.61, abs=0.01)
