"""Repeated train/test experiment measuring the public-safety cost of each
fairness constraint."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import Cohort, split_train_test
from .optimize import optimize
from .risk import auc, fit_risk_model, predict_cohort
from .rules import (
    UNCONSTRAINED,
    ConstraintSpec,
    DecisionOutcome,
    apply_rule,
    detention_rate,
    false_positive_rate,
    tie_uniforms,
)

log = logging.getLogger(__name__)


class ComparisonError(ValueError):
    pass


def crime_increase(constrained, unconstrained, outcomes) -> float:
    """Relative change in reoffenders among the released.

    (released reoffenders under the constrained rule minus those under the
    unconstrained rule) / released reoffenders under the unconstrained
    rule; nan when the latter is zero.
    """
    dc = _detained(constrained)
    du = _detained(unconstrained)
    y = np.asarray(outcomes, dtype=float)
    if abs(int(dc.sum()) - int(du.sum())) > 1:
        raise ComparisonError(f"detention counts differ by more than one ({int(dc.sum())} vs {int(du.sum())})")
    base = float(((1 - du) * y).sum())
    if base == 0:
        return float("nan")
    return (float(((1 - dc) * y).sum()) - base) / base


def low_risk_share(constrained, unconstrained) -> float:
    """Fraction of constrained-rule detainees whom the unconstrained rule releases."""
    dc = _detained(constrained)
    du = _detained(unconstrained)
    if dc.sum() == 0:
        return float("nan")
    return float(((dc == 1) & (du == 0)).sum() / dc.sum())


def _detained(decisions) -> np.ndarray:
    if isinstance(decisions, DecisionOutcome):
        return decisions.detain.astype(int)
    return np.asarray(decisions).astype(int)


def rebudget(detain, scores, ids, k: int, tie_seed: int) -> np.ndarray:
    """Top-k detention set closest to ``detain``.

    Adds the riskiest released or drops the least risky detained
    individuals; equal scores are ordered by the tie hash.
    """
    detain = np.asarray(detain).astype(int).copy()
    order = np.lexsort((tie_uniforms(tie_seed, ids), -np.asarray(scores, dtype=float)))
    current = int(detain.sum())
    if current < k:
        candidates = [i for i in order if detain[i] == 0]
        detain[candidates[: k - current]] = 1
    elif current > k:
        candidates = [i for i in order[::-1] if detain[i] == 1]
        detain[candidates[: current - k]] = 0
    return detain


@dataclass
class SplitResult:
    index: int
    seed: int
    ok: bool
    error: str = ""
    model_auc: float = float("nan")
    vendor_auc: float = float("nan")
    l1_strength: float = float("nan")
    rows: dict = field(default_factory=dict)  # spec label -> metrics


def spec_label(spec: ConstraintSpec) -> str:
    return spec.kind if spec.slack == 0 else f"{spec.kind}@{spec.slack:g}"


def split_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def run_split(cohort: Cohort, specs: Sequence[ConstraintSpec], train_fraction: float, alpha: float,
              seed: int, index: int, l1_strength: float | None = None, exclude_vendor: bool = False) -> SplitResult:
    sub = split_seed(seed, index)
    out = SplitResult(index, sub, ok=False)
    try:
        train, test = split_train_test(cohort, train_fraction, sub)
        vendor = test.column("vendor_score") if "vendor_score" in cohort.feature_names else None
        if exclude_vendor and vendor is not None:
            train, test = train.drop_feature("vendor_score"), test.drop_feature("vendor_score")
        model = fit_risk_model(train, l1_strength, seed=sub)
        out.l1_strength = model.l1_strength
        p_train = predict_cohort(model, train)
        p_test = predict_cohort(model, test)
        y = test.outcomes
        if 0 < y.sum() < len(y):
            out.model_auc = auc(p_test, y)
            if vendor is not None:
                out.vendor_auc = auc(vendor, y)

        base_rule = optimize(p_train, train, ConstraintSpec(UNCONSTRAINED, alpha), tie_seed=sub).rule
        base = apply_rule(base_rule, test, p_test)
        for spec in specs:
            res = optimize(p_train, train, spec, tie_seed=sub)
            dec = apply_rule(res.rule, test, p_test)
            k = int(dec.detain.sum())
            comparison = rebudget(base.detain, p_test, test.ids, k, sub)
            out.rows[spec_label(spec)] = {
                "crime_increase": crime_increase(dec, comparison, y),
                "low_risk_share": low_risk_share(dec, comparison),
                "detained": k / len(test),
                "detention_rate": detention_rate(dec),
                "fpr": false_positive_rate(dec, "empirical"),
                "train_objective": res.objective,
                "train_residual": res.achieved_residual,
            }
        out.ok = True
    except Exception as exc:  # noqa: BLE001 - a failed split is logged and excluded
        out.error = f"{type(exc).__name__}: {exc}"
        log.warning("split %d failed: %s", index, out.error)
    return out


@dataclass
class ConstraintRow:
    label: str
    kind: str
    slack: float
    low_risk_share: float
    low_risk_share_se: float
    crime_increase: float
    crime_increase_se: float
    detained: float
    detention_rate: dict[str, float]
    fpr: dict[str, float]
    splits: int


@dataclass
class CostReport:
    rows: list[ConstraintRow]
    splits_requested: int
    splits_failed: list[tuple[int, str]]
    alpha: float
    train_fraction: float
    seed: int
    model_auc: float
    model_auc_se: float
    vendor_auc: float
    vendor_auc_se: float
    groups: tuple[str, ...]
    per_split: list[SplitResult] = field(default_factory=list, repr=False)

    def row(self, label: str) -> ConstraintRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.csv_text())

    def write_splits_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.splits_csv_text())

    def csv_text(self) -> str:
        """One row per constraint, floats at 17 significant digits."""
        fields = ["constraint", "slack", "low_risk_share", "low_risk_share_se", "crime_increase",
                  "crime_increase_se", "detained", "splits"]
        fields += [f"detention_rate_{g}" for g in self.groups] + [f"fpr_{g}" for g in self.groups]
        fh = io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in self.rows:
            w.writerow(
                [r.label, _f17(r.slack), _f17(r.low_risk_share), _f17(r.low_risk_share_se),
                 _f17(r.crime_increase), _f17(r.crime_increase_se), _f17(r.detained), r.splits]
                + [_f17(r.detention_rate.get(g, math.nan)) for g in self.groups]
                + [_f17(r.fpr.get(g, math.nan)) for g in self.groups]
            )
        return fh.getvalue()

    def splits_csv_text(self) -> str:
        fields = ["split", "seed", "ok", "error", "model_auc", "vendor_auc", "l1_strength", "constraint",
                  "low_risk_share", "crime_increase", "detained", "train_objective", "train_residual"]
        fields += [f"detention_rate_{g}" for g in self.groups] + [f"fpr_{g}" for g in self.groups]
        fh = io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for s in self.per_split:
            head = [s.index, s.seed, int(s.ok), s.error, _f17(s.model_auc), _f17(s.vendor_auc),
                    _f17(s.l1_strength)]
            if not s.rows:
                w.writerow(head + [""] * (len(fields) - len(head)))
            for label, m in s.rows.items():
                w.writerow(
                    head + [label, _f17(m["low_risk_share"]), _f17(m["crime_increase"]), _f17(m["detained"]),
                            _f17(m["train_objective"]), _f17(m["train_residual"])]
                    + [_f17(m["detention_rate"].get(g, math.nan)) for g in self.groups]
                    + [_f17(m["fpr"].get(g, math.nan)) for g in self.groups]
                )
        return fh.getvalue()

    def table(self) -> str:
        """Aligned text table: percent of detainees that are low risk and
        estimated increase in crime, mean (standard error)."""
        head = ["Constraint", "Low-risk detainees", "Crime increase", "Splits"]
        body = [
            [r.label, f"{_pct(r.low_risk_share)} ({_pct(r.low_risk_share_se)})",
             f"{_pct(r.crime_increase)} ({_pct(r.crime_increase_se)})", str(r.splits)]
            for r in self.rows
        ]
        widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
        lines.append("")
        lines.append(f"model AUC {self.model_auc:.4g} (se {self.model_auc_se:.2g}); "
                     f"vendor AUC {self.vendor_auc:.4g} (se {self.vendor_auc_se:.2g})")
        if self.splits_failed:
            lines.append(f"failed splits: {len(self.splits_failed)}")
        return "\n".join(lines) + "\n"


def _f17(x) -> str:
    return "" if x is None else f"{float(x):.17g}"


def _pct(x: float) -> str:
    return "nan" if x is None or math.isnan(x) else f"{100 * x:.4g}%"


def _mean_se(values) -> tuple[float, float]:
    v = np.array([x for x in values if not math.isnan(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _mean_dict(dicts) -> dict[str, float]:
    keys = sorted({k for d in dicts for k in d})
    return {k: _mean_se([d.get(k, math.nan) for d in dicts])[0] for k in keys}


def run_experiment(cohort: Cohort, specs: Sequence[ConstraintSpec], splits: int = 100, train_fraction: float = 0.7,
                   alpha: float = 0.3, seed: int = 0, *, l1_strength: float | None = None,
                   exclude_vendor: bool = False, workers: int = 1) -> CostReport:
    """Fit, optimize on train, evaluate on test, for each of ``splits`` splits.

    Every spec is evaluated against the same split's unconstrained rule,
    re-budgeted on the test set to the constrained rule's detention count.
    """
    if splits < 1:
        raise ValueError("need at least one split")
    if not any(s.kind == UNCONSTRAINED for s in specs):
        raise ValueError("specs must include the unconstrained baseline")
    for s in specs:
        if not math.isclose(s.budget, alpha):
            raise ValueError(f"spec {spec_label(s)} has budget {s.budget}, experiment uses {alpha}")
    args = [(cohort, specs, train_fraction, alpha, seed, i, l1_strength, exclude_vendor) for i in range(splits)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_split_args, args))
    else:
        results = [run_split(*a) for a in args]
    results.sort(key=lambda r: r.index)
    good = [r for r in results if r.ok]
    failed = [(r.index, r.error) for r in results if not r.ok]

    rows = []
    for spec in specs:
        label = spec_label(spec)
        metrics = [r.rows[label] for r in good]
        lrs, lrs_se = _mean_se([m["low_risk_share"] for m in metrics])
        ci, ci_se = _mean_se([m["crime_increase"] for m in metrics])
        rows.append(ConstraintRow(
            label, spec.kind, spec.slack, lrs, lrs_se, ci, ci_se,
            _mean_se([m["detained"] for m in metrics])[0],
            _mean_dict([m["detention_rate"] for m in metrics]),
            _mean_dict([m["fpr"] for m in metrics]),
            len(metrics),
        ))
    m_auc, m_se = _mean_se([r.model_auc for r in good])
    v_auc, v_se = _mean_se([r.vendor_auc for r in good])
    return CostReport(rows, splits, failed, alpha, train_fraction, seed, m_auc, m_se, v_auc, v_se,
                      tuple(cohort.group_set), results)


def _run_split_args(a):
    return run_split(*a)


def report_dict(report: CostReport) -> dict:
    d = asdict(report)
    d.pop("per_split")
    return d
