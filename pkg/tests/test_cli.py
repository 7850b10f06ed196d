import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fairthresh.cli import main
from fairthresh.data import BetaPopulation, Cohort, Individual, read_canonical, sample_beta_population, write_cohort


@pytest.fixture
def canon(tmp_path):
    """Small canonical cohort with a probability feature and prior strata."""
    rng = np.random.default_rng(0)
    pop = sample_beta_population(BetaPopulation({"a": (2, 5), "b": (3, 4)}, {"a": 0.5, "b": 0.5}, 600), seed=1)
    strata = rng.choice(["0", "1-2", "3-4", "5+"], len(pop))
    inds = tuple(Individual(i.id, (i.features[0], float(rng.integers(18, 60))), i.group, i.outcome, s)
                 for i, s in zip(pop.individuals, strata))
    c = Cohort(inds, ("risk", "age"), ("a", "b"), "priors")
    path = tmp_path / "canon.csv"
    write_cohort(c, path)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_prepare_canonical_passthrough(canon, tmp_path):
    out = tmp_path / "prep"
    assert main(["prepare", "--input", str(canon), "--out", str(out)]) == 0
    assert read_canonical(out / "cohort.csv").individuals == read_canonical(canon).individuals
    counts = dict((r["clause"], r["count"]) for r in read_csv(out / "filter_counts.csv"))
    assert counts["input_rows"] == counts["output_rows"] == "600"
    assert json.loads((out / "config.json").read_text())["command"] == "prepare"


def test_prepare_with_schema_counts_drops(tmp_path):
    (tmp_path / "d.csv").write_text("pid,race,y,p\n1,A,0,2\n2,B,1,-1\n3,A,1,x\n4,B,0,3\n")
    (tmp_path / "s.txt").write_text("id = pid\ngroup = race\noutcome = y\nfeature:priors = p\n")
    out = tmp_path / "o"
    assert main(["prepare", "--input", str(tmp_path / "d.csv"), "--schema", str(tmp_path / "s.txt"),
                 "--out", str(out)]) == 0
    counts = dict((r["clause"], r["count"]) for r in read_csv(out / "filter_counts.csv"))
    assert counts == {"input_rows": "4", "drop:rejected_row": "2", "output_rows": "2"}


@pytest.mark.broward
def test_prepare_broward(broward_path, tmp_path):
    out = tmp_path / "b"
    assert main(["prepare", "--input", broward_path, "--out", str(out)]) == 0
    counts = dict((r["clause"], r["count"]) for r in read_csv(out / "filter_counts.csv"))
    assert counts["output_rows"] == "3329"
    assert len(read_canonical(out / "cohort.csv")) == 3329


def test_experiment_is_reproducible(canon, tmp_path):
    argv = ["experiment", "--input", str(canon), "--splits", "1", "--seed", "7", "--l1", "0.01"]
    assert main(argv + ["--out", str(tmp_path / "r1")]) == 0
    assert main(argv + ["--out", str(tmp_path / "r2")]) == 0
    for name in ("table1.csv", "splits.csv", "table1.txt"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    c1 = json.loads((tmp_path / "r1" / "config.json").read_text())
    c2 = json.loads((tmp_path / "r2" / "config.json").read_text())
    c1.pop("out"), c2.pop("out")
    assert c1 == c2
    labels = [r["constraint"] for r in read_csv(tmp_path / "r1" / "table1.csv")]
    assert labels == ["unconstrained", "statistical_parity", "conditional_statistical_parity",
                      "predictive_equality"]


def test_experiment_unconstrained_only(canon, tmp_path):
    out = tmp_path / "u"
    assert main(["experiment", "--input", str(canon), "--out", str(out), "--splits", "2",
                 "--constraints", "unconstrained", "--l1", "0"]) == 0
    (row,) = read_csv(out / "table1.csv")
    assert float(row["crime_increase"]) == 0 and float(row["low_risk_share"]) == 0


@pytest.mark.parametrize("extra", [
    ["--alpha", "1.5"],
    ["--alpha", "0"],
    ["--delta", "-0.1"],
    ["--splits", "0"],
    ["--constraints", "equalized_odds"],
    ["--train-fraction", "1"],
    ["--no-such-flag"],
])
def test_invalid_arguments_exit_2_without_output(canon, tmp_path, extra):
    out = tmp_path / "bad"
    assert main(["experiment", "--input", str(canon), "--out", str(out)] + extra) == 2
    assert not out.exists()


def test_missing_input_exits_2(tmp_path):
    assert main(["prepare", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_runtime_failure_exits_3(tmp_path):
    # single-class outcomes: the model fit fails after arguments validate
    inds = tuple(Individual(str(i), (float(i),), "ab"[i % 2], 0) for i in range(20))
    path = tmp_path / "flat.csv"
    write_cohort(Cohort(inds, ("x",)), path)
    out = tmp_path / "o"
    assert main(["disparity", "--input", str(path), "--out", str(out)]) == 3
    assert not out.exists()


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fairthresh.cli", "audit", "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "exactly one of --input or --synthetic" in proc.stderr


def test_disparity_beta(tmp_path):
    out = tmp_path / "d"
    assert main(["disparity", "--beta", "2,8", "--beta", "1,4", "--n", "20000", "--out", str(out),
                 "--svg"]) == 0
    rows = read_csv(out / "disparity.csv")
    rates = {r["group"]: float(r["value"]) for r in rows if r["panel"] == "detention_rate"}
    assert set(rates) == {"g1", "g2"}
    assert 0.25 < rates["g1"] < 0.35 and 0.25 < rates["g2"] < 0.35
    assert (out / "density.svg").read_text().startswith("<svg")
    dens = read_csv(out / "density.csv")
    assert len(dens) == 2 * 201


def test_disparity_single_group(tmp_path):
    out = tmp_path / "d"
    assert main(["disparity", "--beta", "2,5", "--n", "5000", "--out", str(out)]) == 0
    rows = read_csv(out / "disparity.csv")
    rates = [float(r["value"]) for r in rows if r["panel"] == "detention_rate"]
    assert rates == [pytest.approx(0.3, abs=1e-3)]


def test_audit_tiny_noise_keeps_informativeness(tmp_path):
    out = tmp_path / "a"
    assert main(["audit", "--synthetic", "--n", "20000", "--noise", "1e-6", "--out", str(out)]) == 0
    info = {r["measure"]: float(r["value"]) for r in read_csv(out / "informativeness.csv")}
    assert abs(info["auc_difference"]) < 1e-3
    for name in ("calibration.csv", "calibration_test.csv", "redline.csv", "redline_calibration_test.csv",
                 "redline_density.csv", "audit.txt"):
        assert (out / name).exists()


def test_audit_on_canonical_input(canon, tmp_path):
    out = tmp_path / "a"
    assert main(["audit", "--input", str(canon), "--score-column", "risk", "--bins", "5", "--out", str(out),
                 "--target-group", "b", "--svg"]) == 0
    text = (out / "audit.txt").read_text()
    assert "target group: b" in text
    assert (out / "redline_density.svg").exists()
    assert len(read_csv(out / "calibration_test.csv")) <= 5
