"""Calibrated risk model: L1 logistic regression followed by Platt scaling."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data import Cohort, Individual
from .logistic import fit_l1_logistic, lambda_max
from .metrics import auc
from .platt import IDENTITY, fit_platt, platt_transform

log = logging.getLogger(__name__)

SCORE_FLOOR = 1e-9
DEFAULT_FOLDS = 5
DEFAULT_GRID_DECADES = 4.0
DEFAULT_GRID_SIZE = 9


@dataclass(frozen=True)
class RiskModel:
    """Linear score ``intercept + coef . x`` on raw features, then Platt.

    ``coefficients`` holds the intercept first, then one weight per
    feature in ``feature_names`` order.
    """

    feature_names: tuple[str, ...]
    coefficients: tuple[float, ...]
    l1_strength: float
    platt: tuple[float, float] = IDENTITY
    uses_race: bool = False
    selection: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(self.coefficients) != len(self.feature_names) + 1:
            raise ValueError("coefficient count must equal feature count + 1")
        if not self.platt[0] < 0:
            raise ValueError(f"Platt slope must be negative for a monotone map, got {self.platt[0]}")
        if self.l1_strength < 0:
            raise ValueError("l1_strength must be nonnegative")

    @property
    def intercept(self) -> float:
        return self.coefficients[0]

    @property
    def weights(self) -> tuple[float, ...]:
        return self.coefficients[1:]

    def raw_score(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.feature_names):
            raise ValueError(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        # elementwise accumulation: bit-identical per row regardless of batch size
        z = np.full(X.shape[0], self.coefficients[0])
        for j, w in enumerate(self.weights):
            z = z + w * X[:, j]
        return z

    def predict(self, X) -> np.ndarray:
        A, B = self.platt
        p = platt_transform(self.raw_score(X), A, B)
        return np.clip(p, SCORE_FLOOR, 1 - SCORE_FLOOR)

    def to_text(self) -> str:
        lines = ["# fairthresh risk model v1", f"l1_strength {self.l1_strength!r}"]
        lines.append(f"uses_race {int(self.uses_race)}")
        lines.append(f"platt_A {_fmt(self.platt[0])}")
        lines.append(f"platt_B {_fmt(self.platt[1])}")
        lines.append(f"coef (intercept) {_fmt(self.coefficients[0])}")
        for name, w in zip(self.feature_names, self.weights):
            lines.append(f"coef {name} {_fmt(w)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RiskModel":
        names, coefs = [], []
        vals: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "coef":
                if parts[1] == "(intercept)":
                    coefs.insert(0, float(parts[2]))
                else:
                    names.append(parts[1])
                    coefs.append(float(parts[2]))
            else:
                vals[parts[0]] = parts[1]
        return cls(
            tuple(names), tuple(coefs), float(vals["l1_strength"]),
            (float(vals["platt_A"]), float(vals["platt_B"])), bool(int(vals.get("uses_race", "0"))),
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RiskModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def predict_risk(model: RiskModel, individual: Individual) -> float:
    if len(individual.features) != len(model.feature_names):
        raise ValueError(
            f"dimension mismatch: model has {len(model.feature_names)} features, "
            f"individual {individual.id} has {len(individual.features)}"
        )
    return float(model.predict([individual.features])[0])


def design_matrix(cohort: Cohort, include_race: bool = False) -> tuple[np.ndarray, tuple[str, ...]]:
    X = cohort.X
    names = cohort.feature_names
    if include_race:
        dummies = [g for g in cohort.group_set[1:]]
        cols = [(cohort.groups == g).astype(float) for g in dummies]
        if cols:
            X = np.column_stack([X] + cols)
        names = names + tuple(f"group={g}" for g in dummies)
    return X, names


def predict_cohort(model: RiskModel, cohort: Cohort) -> np.ndarray:
    X, names = design_matrix(cohort, include_race=model.uses_race)
    if names != model.feature_names:
        raise ValueError(f"model features {model.feature_names} do not match cohort {names}")
    return model.predict(X)


@dataclass
class _Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(mean, scale)

    def __call__(self, X):
        return (X - self.mean) / self.scale

    def unstandardize(self, b0, w):
        w_raw = w / self.scale
        return b0 - float(w_raw @ self.mean), w_raw


def stratified_folds(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    folds = np.empty(len(y), dtype=int)
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % k
    return folds


def _fit_linear(X, y, lam, warm=None):
    """Fit on raw features; returns (intercept, weights) on the raw scale."""
    st = _Standardizer.fit(X)
    warm_std = None
    if warm is not None:
        b0, w = warm
        w_std = w * st.scale
        warm_std = (b0 + float(w @ st.mean), w_std)
    res = fit_l1_logistic(st(X), y, lam, warm_start=warm_std)
    if not res.converged:
        log.warning("coordinate descent hit the sweep limit at lambda=%g", lam)
    return st.unstandardize(res.intercept, res.coef)


def l1_grid(X, y, size: int = DEFAULT_GRID_SIZE, decades: float = DEFAULT_GRID_DECADES) -> np.ndarray:
    """Decreasing logarithmic grid from lambda_max down ``decades`` decades."""
    lmax = lambda_max(_Standardizer.fit(X)(X), y)
    if lmax == 0:
        return np.array([0.0])
    return lmax * np.logspace(0.0, -decades, size)


def select_l1_strength(X, y, grid, folds: np.ndarray) -> tuple[float, dict]:
    """Choose the penalty with the highest mean held-out AUC; ties go to the
    larger penalty."""
    k = folds.max() + 1
    scores = np.zeros((len(grid), k))
    for f in range(k):
        tr, te = folds != f, folds == f
        warm = None
        for i, lam in enumerate(grid):
            b0, w = _fit_linear(X[tr], y[tr], lam, warm)
            warm = (b0, w)
            z = b0 + X[te] @ w
            ytest = y[te]
            scores[i, f] = auc(z, ytest) if 0 < ytest.sum() < len(ytest) else 0.5
    mean = scores.mean(axis=1)
    best = int(np.flatnonzero(mean >= mean.max() - 1e-12)[0])
    return float(grid[best]), {"grid": [float(g) for g in grid], "cv_auc": [float(m) for m in mean]}


def fit_risk_model(
    train: Cohort,
    l1_strength: float | None = None,
    seed: int = 0,
    *,
    folds: int = DEFAULT_FOLDS,
    grid: Sequence[float] | None = None,
    include_race: bool = False,
) -> RiskModel:
    """Fit L1 logistic regression, then Platt-scale on out-of-fold scores.

    With ``l1_strength=None`` the penalty is picked by ``folds``-fold
    cross-validated AUC over ``grid`` (default: a 9-point log grid spanning
    four decades below lambda_max). Group membership is never a feature
    unless ``include_race`` is set.
    """
    X, names = design_matrix(train, include_race)
    y = train.outcomes.astype(float)
    if len(y) < 2:
        raise ValueError("training cohort needs at least 2 individuals")
    if y.min() == y.max():
        raise ValueError("training outcomes are a single class")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features in training cohort")

    rng = np.random.default_rng(seed)
    fold_id = stratified_folds(y, folds, rng)
    selection: dict = {}
    if l1_strength is None:
        grid = np.asarray(grid if grid is not None else l1_grid(X, y), dtype=float)
        l1_strength, selection = select_l1_strength(X, y, grid, fold_id)
        log.info("selected l1_strength=%.6g by %d-fold CV AUC", l1_strength, folds)
    elif not math.isfinite(l1_strength) and l1_strength > 0:
        # fully penalized: intercept-only model
        rate = y.mean()
        return RiskModel(names, (math.log(rate / (1 - rate)),) + (0.0,) * len(names), math.inf, IDENTITY,
                         include_race, {"l1_strength": "inf"})

    b0, w = _fit_linear(X, y, l1_strength)
    if not np.any(w):
        platt = IDENTITY
    else:
        oof = np.empty(len(y))
        for f in range(folds):
            tr, te = fold_id != f, fold_id == f
            fb0, fw = _fit_linear(X[tr], y[tr], l1_strength)
            oof[te] = fb0 + X[te] @ fw
        platt = fit_platt(oof, y)
    selection["l1_strength"] = l1_strength
    coefs = (float(b0),) + tuple(float(v) for v in w)
    return RiskModel(names, coefs, float(l1_strength), platt, include_race, selection)
