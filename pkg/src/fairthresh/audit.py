"""Calibration audits and the redlining construction: calibrated scores
that still keep an entire group below a single threshold."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit
from scipy.stats import chi2_contingency, gaussian_kde, norm

from .data import BetaPopulation, Cohort, sample_beta_population
from .risk import Bins, auc, calibration_curve, default_bins, wilson_interval
from .risk.logistic import fit_logistic_newton

SCORE_EPS = 1e-6
NOISE_SCALES = ("logodds", "prob")


@dataclass(frozen=True)
class RedlineArtifact:
    original: np.ndarray  # every individual
    perturbed: np.ndarray  # nan outside the target group
    refit: np.ndarray  # original scores with the target group's replaced
    target: np.ndarray  # boolean mask
    noise_sd: float
    noise_scale: str
    threshold: float
    refit_coef: tuple[float, float]  # intercept, slope
    above_before: float
    above_after: float

    def rows(self) -> list[dict]:
        return [
            {"index": i, "target": int(t), "original": o, "perturbed": p, "refit": r}
            for i, (t, o, p, r) in enumerate(zip(self.target, self.original, self.perturbed, self.refit))
        ]


def redline_population(n: int = 50_000, params=(2.0, 5.0), seed: int = 0) -> Cohort:
    """Two equally sized groups ``a`` and ``b`` with identical beta risk."""
    spec = BetaPopulation({"a": tuple(params), "b": tuple(params)}, {"a": 0.5, "b": 0.5}, n)
    return sample_beta_population(spec, seed)


def redline_scores(scores, groups, outcomes, target_group: str, noise_sd: float, threshold: float | None = None,
                   seed: int = 0, scale: str = "logodds", quantile: float = 0.7) -> RedlineArtifact:
    """Blur the target group's scores with Gaussian noise, then replace them
    by a one-feature logistic refit of outcome on the blurred score.

    ``threshold`` defaults to the ``quantile`` of the original scores.
    """
    if not noise_sd > 0:
        raise ValueError("noise_sd must be positive")
    if scale not in NOISE_SCALES:
        raise ValueError(f"noise scale must be one of {NOISE_SCALES}")
    s = np.asarray(scores, dtype=float)
    g = np.asarray(groups, dtype=object)
    y = np.asarray(outcomes).astype(int)
    target = g == target_group
    if not target.any():
        raise ValueError(f"target group {target_group!r} is empty")
    yt = y[target]
    if yt.min() == yt.max():
        raise ValueError("target group outcomes are all one class")
    if threshold is None:
        threshold = float(np.quantile(s, quantile))

    rng = np.random.default_rng(seed)
    st = np.clip(s[target], SCORE_EPS, 1 - SCORE_EPS)
    noise = rng.normal(0.0, noise_sd, st.size)
    z = logit(st) + noise if scale == "logodds" else np.clip(st + noise, SCORE_EPS, 1 - SCORE_EPS)
    b0, w = fit_logistic_newton(z[:, None], yt)
    fitted = expit(b0 + w[0] * z)

    perturbed = np.full(s.size, np.nan)
    perturbed[target] = z
    refit = s.copy()
    refit[target] = fitted
    return RedlineArtifact(
        s, perturbed, refit, target, float(noise_sd), scale, float(threshold), (float(b0), float(w[0])),
        float((s[target] > threshold).mean()), float((fitted > threshold).mean()),
    )


@dataclass(frozen=True)
class BinTest:
    bin: str
    counts: dict[str, int]
    rates: dict[str, float]
    intervals: dict[str, tuple[float, float]]
    gap: float
    p_value: float
    adjusted_p: float
    reject: bool


@dataclass(frozen=True)
class CalibrationAudit:
    tests: tuple[BinTest, ...]
    groups: tuple[str, ...]
    level: float
    method: str
    passed: bool

    def rows(self) -> list[dict]:
        out = []
        for t in self.tests:
            row = {"bin": t.bin, "gap": t.gap, "p_value": t.p_value, "adjusted_p": t.adjusted_p,
                   "reject": int(t.reject)}
            for grp in self.groups:
                lo, hi = t.intervals.get(grp, (math.nan, math.nan))
                row.update({f"count_{grp}": t.counts.get(grp, 0), f"rate_{grp}": t.rates.get(grp, math.nan),
                            f"lower_{grp}": lo, f"upper_{grp}": hi})
            out.append(row)
        return out


def _two_proportion_p(k1: int, n1: int, k2: int, n2: int) -> float:
    pooled = (k1 + k2) / (n1 + n2)
    if pooled in (0.0, 1.0):
        return 1.0
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    z = (k1 / n1 - k2 / n2) / se
    return float(2 * norm.sf(abs(z)))


def audit_calibration(scores, groups, outcomes, bins: Bins | None = None, level: float = 0.05) -> CalibrationAudit:
    """Per-bin test that outcome rates agree across groups.

    Two groups use the pooled two-proportion z test, more use a chi-square
    test of homogeneity. Bins where fewer than two groups are present are
    skipped; the rest share a Bonferroni correction.
    """
    s = np.asarray(scores, dtype=float)
    g = np.asarray(groups, dtype=object)
    y = np.asarray(outcomes).astype(int)
    group_set = tuple(sorted(set(g.tolist())))
    if len(group_set) < 2:
        raise ValueError("calibration audit needs at least two groups")
    if bins is None:
        bins = default_bins(s)
    curve = calibration_curve(s, g, y, bins)

    raw = []
    for label in bins.labels:
        cells = [curve.get(label, grp) for grp in group_set]
        present = [c for c in cells if not c.empty]
        if len(present) < 2:
            continue
        if len(present) == 2:
            a, b = present
            p = _two_proportion_p(a.positives, a.count, b.positives, b.count)
        else:
            table = np.array([[c.positives, c.count - c.positives] for c in present])
            p = 1.0 if (table.sum(axis=0) == 0).any() else float(chi2_contingency(table, correction=False)[1])
        rates = {c.group: c.rate for c in present}
        raw.append((label, present, rates, p))
    if not raw:
        raise ValueError("no bin is occupied by more than one group")

    m = len(raw)
    tests = []
    for label, present, rates, p in raw:
        adj = min(1.0, p * m)
        tests.append(BinTest(
            label, {c.group: c.count for c in present}, rates, {c.group: (c.lower, c.upper) for c in present},
            max(rates.values()) - min(rates.values()), p, adj, p < level / m,
        ))
    method = "two_proportion" if len(group_set) == 2 else "chi_square"
    return CalibrationAudit(tuple(tests), group_set, level, method, not any(t.reject for t in tests))


@dataclass(frozen=True)
class InformativenessReport:
    auc_original: float
    auc_refit: float
    auc_difference: float  # original minus refit
    sd_original: float
    sd_refit: float
    sd_difference: float  # original minus refit

    def rows(self) -> list[dict]:
        return [{"measure": k, "value": v} for k, v in self.__dict__.items()]


def informativeness_report(original, refit, outcomes) -> InformativenessReport:
    o = np.asarray(original, dtype=float)
    r = np.asarray(refit, dtype=float)
    if o.shape != r.shape:
        raise ValueError("score sets must cover the same individuals")
    a_o, a_r = auc(o, outcomes), auc(r, outcomes)
    sd_o, sd_r = float(o.std()), float(r.std())
    return InformativenessReport(a_o, a_r, a_o - a_r, sd_o, sd_r, sd_o - sd_r)


def silverman_bandwidth(values) -> float:
    v = np.asarray(values, dtype=float)
    iqr = np.subtract(*np.percentile(v, [75, 25]))
    spread = min(v.std(ddof=1), iqr / 1.34) if iqr > 0 else v.std(ddof=1)
    return float(0.9 * spread * v.size ** -0.2)


def density_curve(values, grid=None, bandwidth: float | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Gaussian kernel density on ``grid`` (default 201 points on [0,1]).

    Returns (grid, density, bandwidth); the bandwidth is in score units.
    """
    v = np.asarray(values, dtype=float)
    if grid is None:
        grid = np.linspace(0.0, 1.0, 201)
    grid = np.asarray(grid, dtype=float)
    h = silverman_bandwidth(v) if bandwidth is None else float(bandwidth)
    if v.size < 2 or h <= 0:
        # degenerate sample: all mass at one point
        return grid, np.zeros_like(grid), h
    kde = gaussian_kde(v, bw_method=h / v.std(ddof=1))
    return grid, kde(grid), h


def write_rows(rows: list[dict], path: str | os.PathLike) -> None:
    """CSV with floats rendered at 17 significant digits."""
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: fmt17(v) for k, v in r.items()})


def fmt17(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, np.integer):
        return int(v)
    return v


__all__ = [
    "BinTest",
    "CalibrationAudit",
    "InformativenessReport",
    "RedlineArtifact",
    "audit_calibration",
    "density_curve",
    "informativeness_report",
    "redline_population",
    "redline_scores",
    "silverman_bandwidth",
    "write_rows",
]
