"""Cohort ingestion: canonical individuals, Broward filtering, splits, and
synthetic beta populations."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

PRIOR_BINS = ("0", "1-2", "3-4", "5+")

# Canonical columns always written first, in this order.
CANONICAL_COLUMNS = ("id", "group", "stratum", "outcome")


class CohortError(ValueError):
    """Raised when input data cannot be turned into a valid cohort."""

    def __init__(self, message: str, rows: Sequence[tuple[int, str]] = ()):
        super().__init__(message)
        self.rows = list(rows)

    def __str__(self) -> str:
        msg = super().__str__()
        if not self.rows:
            return msg
        shown = "; ".join(f"row {i}: {why}" for i, why in self.rows[:10])
        more = f" (+{len(self.rows) - 10} more)" if len(self.rows) > 10 else ""
        return f"{msg}: {shown}{more}"


@dataclass(frozen=True)
class Individual:
    id: str
    features: tuple[float, ...]
    group: str
    outcome: int
    stratum: str | None = None

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise CohortError(f"individual {self.id}: outcome must be 0 or 1, got {self.outcome!r}")


@dataclass(frozen=True)
class Cohort:
    individuals: tuple[Individual, ...]
    feature_names: tuple[str, ...]
    group_set: tuple[str, ...] = ()
    stratifier: str | None = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        groups = tuple(sorted({ind.group for ind in self.individuals}))
        if not self.group_set:
            object.__setattr__(self, "group_set", groups)
        else:
            object.__setattr__(self, "group_set", tuple(self.group_set))
            missing = set(groups) - set(self.group_set)
            if missing:
                raise CohortError(f"groups {sorted(missing)} not in declared group set")
        k = len(self.feature_names)
        for ind in self.individuals:
            if len(ind.features) != k:
                raise CohortError(f"individual {ind.id}: expected {k} features, got {len(ind.features)}")
            if self.stratifier is not None and ind.stratum is None:
                raise CohortError(f"individual {ind.id}: stratifier {self.stratifier!r} declared but stratum missing")

    def __len__(self) -> int:
        return len(self.individuals)

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def ids(self) -> np.ndarray:
        return self._cached("ids", lambda: np.array([i.id for i in self.individuals], dtype=object))

    @property
    def groups(self) -> np.ndarray:
        return self._cached("groups", lambda: np.array([i.group for i in self.individuals], dtype=object))

    @property
    def strata(self) -> np.ndarray | None:
        if self.stratifier is None:
            return None
        return self._cached("strata", lambda: np.array([i.stratum for i in self.individuals], dtype=object))

    @property
    def outcomes(self) -> np.ndarray:
        return self._cached("y", lambda: np.array([i.outcome for i in self.individuals], dtype=np.int64))

    @property
    def X(self) -> np.ndarray:
        def build():
            if not self.individuals:
                return np.empty((0, len(self.feature_names)))
            return np.array([i.features for i in self.individuals], dtype=float).reshape(len(self), -1)
        return self._cached("X", build)

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"cohort has no feature {name!r}; have {self.feature_names}") from None
        return self.X[:, j]

    def subset(self, index: Iterable[int]) -> "Cohort":
        inds = tuple(self.individuals[i] for i in index)
        return Cohort(inds, self.feature_names, self.group_set, self.stratifier)

    def drop_feature(self, name: str) -> "Cohort":
        j = self.feature_names.index(name)
        names = self.feature_names[:j] + self.feature_names[j + 1:]
        inds = tuple(
            Individual(i.id, i.features[:j] + i.features[j + 1:], i.group, i.outcome, i.stratum)
            for i in self.individuals
        )
        return Cohort(inds, names, self.group_set, self.stratifier)


@dataclass(frozen=True)
class BetaPopulation:
    """Per-group beta risk distributions, mixed by `weights`."""

    params: Mapping[str, tuple[float, float]]
    weights: Mapping[str, float]
    n: int

    def __post_init__(self):
        if set(self.params) != set(self.weights):
            raise ValueError("params and weights must name the same groups")
        for g, (a, b) in self.params.items():
            if not (a > 0 and b > 0):
                raise ValueError(f"group {g}: beta parameters must be positive, got ({a}, {b})")
        for g, w in self.weights.items():
            if not 0 < w < 1 and len(self.weights) > 1:
                raise ValueError(f"group {g}: weight must lie in (0,1), got {w}")
        if not math.isclose(sum(self.weights.values()), 1.0, abs_tol=1e-9):
            raise ValueError("weights must sum to 1")
        if self.n < 1:
            raise ValueError("sample count must be positive")


# ---------------------------------------------------------------------------
# schema files and generic loading


def read_schema(path: str | os.PathLike) -> dict[str, str]:
    """Parse a ``key = value`` schema mapping; ``#`` starts a comment.

    Feature columns are given as ``feature:<name> = <column>`` and keep
    their file order.
    """
    schema: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CohortError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key or not value:
                raise CohortError(f"{path}:{lineno}: empty key or value")
            schema[key] = value
    for required in ("id", "group", "outcome"):
        if required not in schema:
            raise CohortError(f"schema {path} lacks required key {required!r}")
    return schema


def schema_features(schema: Mapping[str, str]) -> list[tuple[str, str]]:
    return [(k.split(":", 1)[1], v) for k, v in schema.items() if k.startswith("feature:")]


def cohort_from_frame(
    df: pd.DataFrame,
    schema: Mapping[str, str],
    group_set: Sequence[str] | None = None,
) -> Cohort:
    """Build a Cohort from a DataFrame using a canonical-field -> column mapping."""
    feats = schema_features(schema)
    needed = [schema["id"], schema["group"], schema["outcome"]] + [c for _, c in feats]
    if "stratum" in schema:
        needed.append(schema["stratum"])
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise CohortError(f"missing mapped column(s): {missing}")

    values_y = df[schema["outcome"]].dropna().astype(str).str.strip()
    bad_y = sorted(set(values_y) - {"0", "1", "0.0", "1.0"})
    if bad_y:
        raise CohortError(f"non-binary outcome column {schema['outcome']!r}: values {bad_y[:5]}")

    stratifier = schema.get("stratifier", schema.get("stratum")) if "stratum" in schema else None
    individuals = []
    rejected: list[tuple[int, str]] = []
    for i, rec in enumerate(df.to_dict("records")):
        try:
            y = rec[schema["outcome"]]
            if y is None or (isinstance(y, float) and math.isnan(y)):
                raise ValueError("outcome missing")
            y = int(float(y))
            values = []
            for name, col in feats:
                v = float(rec[col])
                if not math.isfinite(v):
                    raise ValueError(f"feature {name} is not finite")
                values.append(v)
            stratum = None
            if stratifier is not None:
                s = rec[schema["stratum"]]
                if s is None or (isinstance(s, float) and math.isnan(s)):
                    raise ValueError("stratum missing")
                stratum = str(s)
            group = rec[schema["group"]]
            if group is None or (isinstance(group, float) and math.isnan(group)):
                raise ValueError("group missing")
            _validate_known_features(dict(zip([n for n, _ in feats], values)))
            individuals.append(Individual(str(rec[schema["id"]]), tuple(values), str(group), y, stratum))
        except (TypeError, ValueError) as exc:
            rejected.append((i, str(exc)))
    if not individuals:
        raise CohortError("empty result", rejected)
    cohort = Cohort(tuple(individuals), tuple(n for n, _ in feats), tuple(group_set or ()), stratifier)
    cohort._cache["rejected"] = rejected
    return cohort


def _validate_known_features(values: Mapping[str, float]) -> None:
    priors = values.get("priors")
    if priors is not None and priors < 0:
        raise ValueError("prior-conviction count must be nonnegative")
    vendor = values.get("vendor_score")
    if vendor is not None and (vendor != int(vendor) or not 1 <= vendor <= 10):
        raise ValueError(f"vendor score {vendor} not an integer in [1,10]")


def load_cohort(path: str | os.PathLike, schema: Mapping[str, str] | str | os.PathLike) -> Cohort:
    """Read a CSV with a header row into a Cohort.

    Rows failing type checks are skipped; they are listed in
    ``rejected_rows(cohort)``.
    """
    if not os.path.exists(path):
        raise CohortError(f"missing file: {path}")
    if not isinstance(schema, Mapping):
        schema = read_schema(schema)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise CohortError("empty result") from None
    if df.empty:
        raise CohortError("empty result")
    for name, col in schema_features(schema):
        if col in df.columns:
            df[col] = pd.to_numeric(df[col], errors="coerce")
    return cohort_from_frame(df, schema)


def rejected_rows(cohort: Cohort) -> list[tuple[int, str]]:
    return list(cohort._cache.get("rejected", []))


def write_cohort(cohort: Cohort, path: str | os.PathLike) -> None:
    """Write the canonical serialization (id, group, stratum, outcome, features...)."""
    rows = {
        "id": cohort.ids,
        "group": cohort.groups,
        "stratum": [i.stratum if i.stratum is not None else "" for i in cohort.individuals],
        "outcome": cohort.outcomes,
    }
    df = pd.DataFrame(rows)
    for j, name in enumerate(cohort.feature_names):
        df[name] = [repr(float(v)) if not float(v).is_integer() else str(int(v)) for v in cohort.X[:, j]]
    df.to_csv(path, index=False, lineterminator="\n")


def canonical_schema(path: str | os.PathLike) -> dict[str, str]:
    """Schema for a file written by `write_cohort`."""
    header = pd.read_csv(path, nrows=0).columns.tolist()
    if list(header[:4]) != list(CANONICAL_COLUMNS):
        raise CohortError(f"{path} is not a canonical cohort file (header {header[:4]})")
    schema = {"id": "id", "group": "group", "outcome": "outcome"}
    body = pd.read_csv(path, usecols=["stratum"], dtype=str, keep_default_na=False)
    if (body["stratum"] != "").all() and len(body):
        schema["stratum"] = "stratum"
        schema["stratifier"] = "stratum"
    for name in header[4:]:
        schema[f"feature:{name}"] = name
    return schema


def read_canonical(path: str | os.PathLike) -> Cohort:
    if not os.path.exists(path):
        raise CohortError(f"missing file: {path}")
    schema = canonical_schema(path)
    stratifier = schema.pop("stratifier", None)
    cohort = load_cohort(path, schema)
    if stratifier is not None:
        first = cohort.individuals[0].stratum if len(cohort) else None
        name = "priors" if first in PRIOR_BINS else "stratum"
        cohort = Cohort(cohort.individuals, cohort.feature_names, cohort.group_set, name)
    return cohort


# ---------------------------------------------------------------------------
# Broward County (ProPublica extract)


def bin_priors(count: int) -> str:
    """Prior-conviction stratum: "0", "1-2", "3-4" or "5+"."""
    if count < 0:
        raise ValueError(f"prior-conviction count must be nonnegative, got {count}")
    if count == 0:
        return "0"
    if count <= 2:
        return "1-2"
    if count <= 4:
        return "3-4"
    return "5+"


RACE_LABELS = {"African-American": "black", "Caucasian": "white"}

BROWARD_REQUIRED = {
    "violent": (
        "id", "race", "days_b_screening_arrest", "c_charge_degree", "is_recid",
        "v_score_text", "two_year_recid", "is_violent_recid", "vr_offense_date",
        "compas_screening_date",
    ),
    "any": ("id", "race", "days_b_screening_arrest", "c_charge_degree", "is_recid", "score_text", "two_year_recid"),
}

BROWARD_SCHEMA = {
    "id": "id",
    "group": "group",
    "outcome": "outcome",
    "stratum": "stratum",
    "stratifier": "priors",
    "feature:age": "age",
    "feature:male": "male",
    "feature:priors": "priors_count",
    "feature:vendor_score": "vendor_score",
}


@dataclass
class FilterReport:
    """Rows dropped by each filter clause, in application order."""

    input_rows: int = 0
    dropped: dict[str, int] = field(default_factory=dict)
    output_rows: int = 0

    def lines(self) -> list[str]:
        out = [f"input_rows,{self.input_rows}"]
        out += [f"drop:{k},{v}" for k, v in self.dropped.items()]
        out.append(f"output_rows,{self.output_rows}")
        return out


def filter_broward(raw: pd.DataFrame, label: str = "violent") -> tuple[pd.DataFrame, FilterReport]:
    """Apply the ProPublica Broward filters and resolve the two-year label.

    ``label="violent"`` keeps defendants who either were arrested for a
    violent crime within 730 days of screening (outcome 1) or spent the two
    years without any re-arrest (outcome 0); everyone else is unresolved and
    dropped. ``label="any"`` uses the general two-year recidivism flag.

    Adds columns ``group``, ``outcome``, ``male``, ``stratum``,
    ``vendor_score``. Idempotent.
    """
    if label not in BROWARD_REQUIRED:
        raise ValueError(f"label must be one of {sorted(BROWARD_REQUIRED)}")
    missing = [c for c in BROWARD_REQUIRED[label] if c not in raw.columns]
    if missing:
        raise CohortError(f"required filter columns absent: {missing}")

    report = FilterReport(input_rows=len(raw))
    df = raw.copy()

    def keep(name: str, mask) -> None:
        nonlocal df
        mask = pd.Series(mask, index=df.index).fillna(False).astype(bool)
        report.dropped[name] = int((~mask).sum())
        df = df[mask]

    # one assessment per person: first screening wins
    if "compas_screening_date" in df.columns:
        df = df.sort_values(["id", "compas_screening_date"], kind="mergesort")
    keep("duplicate_id", ~df["id"].duplicated(keep="first"))
    keep("race_not_black_or_white", df["race"].isin(list(RACE_LABELS) + ["black", "white"]))
    # screened within 30 days of arrest
    days = pd.to_numeric(df["days_b_screening_arrest"], errors="coerce")
    keep("screening_over_30_days", days.abs() <= 30)
    # is_recid == -1 marks cases ProPublica could not match
    keep("no_case_match", pd.to_numeric(df["is_recid"], errors="coerce") != -1)
    # charge degree "O" is an ordinary traffic offense
    keep("traffic_charge", df["c_charge_degree"] != "O")
    score_text = "v_score_text" if label == "violent" else "score_text"
    keep("missing_score", df[score_text].notna() & (df[score_text] != "N/A"))

    two_year = pd.to_numeric(df["two_year_recid"], errors="coerce")
    if label == "violent":
        screened = pd.to_datetime(df["compas_screening_date"], errors="coerce")
        violent_on = pd.to_datetime(df["vr_offense_date"], errors="coerce")
        lag = (violent_on - screened).dt.days
        violent = (pd.to_numeric(df["is_violent_recid"], errors="coerce") == 1) & lag.between(0, 730)
        clean = two_year == 0
        keep("unresolved_two_year_label", violent | clean)
        outcome = violent[df.index].astype(int)
    else:
        keep("unresolved_two_year_label", two_year.isin([0, 1]))
        outcome = two_year[df.index].astype(int)

    df = df.assign(
        outcome=outcome,
        group=df["race"].map(lambda r: RACE_LABELS.get(r, r)),
        male=(df["sex"].isin(["Male", 1, "1"])).astype(int) if "sex" in df.columns else 0,
        stratum=pd.to_numeric(df["priors_count"], errors="coerce").map(
            lambda c: bin_priors(int(c)) if pd.notna(c) and c >= 0 else None
        ) if "priors_count" in df.columns else None,
    )
    vendor_col = "v_decile_score" if label == "violent" else "decile_score"
    if vendor_col in df.columns:
        df = df.assign(vendor_score=pd.to_numeric(df[vendor_col], errors="coerce"))
    df = df.sort_index(kind="mergesort")
    report.output_rows = len(df)
    return df, report


def load_broward(path: str | os.PathLike, label: str = "violent") -> tuple[Cohort, FilterReport]:
    """Read the ProPublica two-year CSV, filter it, and build the cohort."""
    if not os.path.exists(path):
        raise CohortError(f"missing file: {path}")
    raw = pd.read_csv(path)
    if raw.empty:
        raise CohortError("empty result")
    df, report = filter_broward(raw, label=label)
    if df.empty:
        raise CohortError("empty result")
    return cohort_from_frame(df, BROWARD_SCHEMA, group_set=("black", "white")), report


# ---------------------------------------------------------------------------
# splits and synthetic data


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_train_test(cohort: Cohort, train_fraction: float, seed: int) -> tuple[Cohort, Cohort]:
    """Random exhaustive, disjoint split with round-half-up train size."""
    n = len(cohort)
    if n == 0:
        raise CohortError("cannot split an empty cohort")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0,1)")
    perm = np.random.default_rng(seed).permutation(n)
    k = round_half_up(train_fraction * n)
    return cohort.subset(sorted(perm[:k])), cohort.subset(sorted(perm[k:]))


def sample_beta_population(spec: BetaPopulation, seed: int) -> Cohort:
    """Draw individuals whose single feature ``risk`` is their true
    Bernoulli outcome probability."""
    rng = np.random.default_rng(seed)
    groups = sorted(spec.params)
    probs = np.array([spec.weights[g] for g in groups])
    labels = rng.choice(len(groups), size=spec.n, p=probs / probs.sum())
    risk = np.empty(spec.n)
    for k, g in enumerate(groups):
        idx = np.flatnonzero(labels == k)
        a, b = spec.params[g]
        risk[idx] = rng.beta(a, b, size=idx.size)
    y = (rng.random(spec.n) < risk).astype(int)
    inds = tuple(
        Individual(f"s{i}", (float(risk[i]),), groups[labels[i]], int(y[i]))
        for i in range(spec.n)
    )
    return Cohort(inds, ("risk",), tuple(groups))
