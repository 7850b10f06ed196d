from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm


def auc(scores, outcomes) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 * P(tie).

    Computed from midranks in O(n log n).
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(outcomes).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and outcomes differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both outcome classes")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # midranks over runs of equal scores
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(s)]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def wilson_interval(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return (float("nan"), float("nan"))
    z = norm.ppf(0.5 + level / 2)
    phat = successes / n
    denom = 1 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * np.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    # guard the rounding at phat in {0, 1}
    return (max(0.0, min(phat, centre - half)), min(1.0, max(phat, centre + half)))


@dataclass(frozen=True)
class Bins:
    """Half-open score intervals [edges[k], edges[k+1]); last bin closed.

    ``labels`` name the bins in output files.
    """

    edges: tuple[float, ...]
    labels: tuple[str, ...]

    @classmethod
    def equal_width(cls, k: int = 10, lo: float = 0.0, hi: float = 1.0) -> "Bins":
        edges = tuple(float(e) for e in np.linspace(lo, hi, k + 1))
        labels = tuple(f"[{edges[i]:.3g},{edges[i + 1]:.3g})" for i in range(k))
        return cls(edges, labels)

    @classmethod
    def integer_levels(cls, lo: int = 1, hi: int = 10) -> "Bins":
        edges = tuple(float(v) - 0.5 for v in range(lo, hi + 2))
        return cls(edges, tuple(str(v) for v in range(lo, hi + 1)))

    def assign(self, scores) -> np.ndarray:
        s = np.asarray(scores, dtype=float)
        edges = np.asarray(self.edges)
        if np.any(s < edges[0]) or np.any(s > edges[-1]):
            raise ValueError("scores fall outside the bin range")
        idx = np.searchsorted(edges, s, side="right") - 1
        return np.minimum(idx, len(self.labels) - 1)


@dataclass(frozen=True)
class CalibrationCell:
    bin: str
    group: str
    count: int
    positives: int
    rate: float  # nan when empty
    lower: float
    upper: float
    mean_score: float

    @property
    def empty(self) -> bool:
        return self.count == 0


@dataclass(frozen=True)
class CalibrationCurve:
    cells: tuple[CalibrationCell, ...]
    bins: Bins
    groups: tuple[str, ...]

    def get(self, bin_label: str, group: str) -> CalibrationCell:
        for c in self.cells:
            if c.bin == bin_label and c.group == group:
                return c
        raise KeyError((bin_label, group))

    def rows(self) -> list[dict]:
        return [
            {
                "bin": c.bin, "group": c.group, "count": c.count, "positives": c.positives,
                "rate": c.rate, "lower": c.lower, "upper": c.upper, "mean_score": c.mean_score,
                "empty": int(c.empty),
            }
            for c in self.cells
        ]


def calibration_curve(scores, groups, outcomes, bins: Bins | None = None) -> CalibrationCurve:
    """Observed positive rate with 95% Wilson intervals per (bin, group)."""
    s = np.asarray(scores, dtype=float)
    g = np.asarray(groups, dtype=object)
    y = np.asarray(outcomes).astype(int)
    if s.size == 0:
        raise ValueError("calibration curve of empty input")
    if bins is None:
        bins = Bins.equal_width(10)
    idx = bins.assign(s)
    group_set = tuple(sorted(set(g.tolist())))
    cells = []
    for k, label in enumerate(bins.labels):
        in_bin = idx == k
        for grp in group_set:
            m = in_bin & (g == grp)
            n = int(m.sum())
            pos = int(y[m].sum())
            if n:
                lo, hi = wilson_interval(pos, n)
                cells.append(CalibrationCell(label, grp, n, pos, pos / n, lo, hi, float(s[m].mean())))
            else:
                nan = float("nan")
                cells.append(CalibrationCell(label, grp, 0, 0, nan, nan, nan, nan))
    return CalibrationCurve(tuple(cells), bins, group_set)


def default_bins(scores: Sequence[float]) -> Bins:
    """Integer levels 1..10 for vendor-style scores, else ten equal-width bins."""
    s = np.asarray(scores, dtype=float)
    if s.size and np.all(s == np.round(s)) and s.min() >= 1 and s.max() <= 10:
        return Bins.integer_levels(1, 10)
    return Bins.equal_width(10)
