from __future__ import annotations

import csv
import shutil
import subprocess
import time
from pathlib import Path

import numpy as np
import pytest

from dosedr import config as cfgmod
from dosedr.cli import main
from dosedr.data import Dataset, save_csv
from dosedr.estimator import DoseResponseEstimate
from dosedr.simulation import dgp_sample, read_results_csv
from dosedr.smoother import local_linear_point

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DATA_FLAGS = ["--treatment", "A", "--outcome", "Y", "--covariates", "V1,V2,V3,V4", "--surrogates", "S1,S2"]


@pytest.fixture(scope="module")
def sample_csv(tmp_path_factory):
    data, _ = dgp_sample(2000, rng=2024)
    path = tmp_path_factory.mktemp("cli") / "sample.csv"
    save_csv(data, path)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_estimate_dr_curve(sample_csv, tmp_path):
    out = tmp_path / "curve.csv"
    assert main(["estimate", "--input", str(sample_csv), *DATA_FLAGS, "--method", "dr",
                 "--out", str(out), "--threads", "1"]) == 0
    rows = read_rows(out)
    assert len(rows) == 25
    assert all(np.isfinite(float(r["se"])) and float(r["se"]) > 0 for r in rows)
    assert {r["method"] for r in rows} == {"dr"}
    est = DoseResponseEstimate.from_csv(out)
    assert np.all(est.ci_lower <= est.theta_hat) and np.all(est.theta_hat <= est.ci_upper)
    cfg = cfgmod.load(str(out) + ".config")
    assert set(cfg) == set(cfgmod.SCHEMA) and cfg["estimation.method"] == "dr"


def test_estimate_plugin_has_empty_se(sample_csv, tmp_path):
    out = tmp_path / "plugin.csv"
    assert main(["estimate", "--input", str(sample_csv), *DATA_FLAGS, "--method", "plugin",
                 "--grid", "0:2:5", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 5 and all(r["se"] == "" for r in rows)
    assert [float(r["a"]) for r in rows] == [0.0, 0.5, 1.0, 1.5, 2.0]


def test_missing_treatment_flag(sample_csv, tmp_path, capsys):
    flags = [f for f in DATA_FLAGS if f not in ("--treatment", "A")]
    code = main(["estimate", "--input", str(sample_csv), *flags, "--out", str(tmp_path / "x.csv")])
    assert code == 2
    assert "--treatment" in capsys.readouterr().err


def test_bad_input_paths_and_columns(sample_csv, tmp_path, capsys):
    assert main(["estimate", "--input", str(tmp_path / "nope.csv"), *DATA_FLAGS,
                 "--out", str(tmp_path / "x.csv")]) == 2
    flags = list(DATA_FLAGS)
    flags[1] = "dose"
    assert main(["estimate", "--input", str(sample_csv), *flags, "--out", str(tmp_path / "x.csv")]) == 2
    assert "dose" in capsys.readouterr().err
    assert main(["estimate", "--input", str(sample_csv), *DATA_FLAGS, "--set", "smoother.colour=red",
                 "--out", str(tmp_path / "x.csv")]) == 2


def test_degenerate_grid_exits_three(sample_csv, tmp_path):
    code = main(["estimate", "--input", str(sample_csv), *DATA_FLAGS, "--grid", "40:41:2",
                 "--bandwidth", "0.1", "--out", str(tmp_path / "x.csv")])
    assert code == 3


def test_fit_failure_exits_one(tmp_path):
    data, _ = dgp_sample(30, rng=1)
    p = tmp_path / "small.csv"
    save_csv(data, p)
    code = main(["estimate", "--input", str(p), *DATA_FLAGS, "--bandwidth", "2", "--grid", "0:1:2",
                 "--out", str(tmp_path / "x.csv")])
    assert code == 1


def test_compare_long_format(sample_csv, tmp_path):
    out = tmp_path / "cmp.csv"
    assert main(["compare", "--input", str(sample_csv), *DATA_FLAGS, "--grid", "0:2:3",
                 "--bandwidth", "0.6", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert [r["method"] for r in rows] == ["plugin"] * 3 + ["dr"] * 3 + ["supervised"] * 3


def test_estimate_threads_byte_identical(sample_csv, tmp_path):
    outs = []
    for t in (1, 3):
        out = tmp_path / f"t{t}.csv"
        assert main(["estimate", "--input", str(sample_csv), *DATA_FLAGS, "--seed", "5",
                     "--threads", str(t), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


# ---------------------------------------------------------------- bandwidth

@pytest.fixture
def points_csv(tmp_path):
    rng = np.random.default_rng(3)
    A = np.sort(rng.uniform(0, 1, 40))
    phi = A ** 2 + rng.normal(0, 0.1, 40)
    d = Dataset(np.zeros((40, 1)), np.zeros((40, 0)), A, phi, covariate_names=("V1",),
                outcome_name="phi")
    p = tmp_path / "pts.csv"
    save_csv(d, p)
    return p, A, phi


PT_FLAGS = ["--treatment", "A", "--outcome", "phi", "--covariates", "V1", "--phi", "phi"]


def test_bandwidth_scores_match_refit(points_csv, tmp_path, capsys):
    p, A, phi = points_csv
    out = tmp_path / "bw.csv"
    assert main(["bandwidth", "--input", str(p), *PT_FLAGS, "--grid", "0.2:1.0:5", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 5 and sum(int(r["chosen"]) for r in rows) == 1
    for r in rows:
        h = float(r["h"])
        brute = sum((phi[i] - local_linear_point(np.delete(A, i), np.delete(phi, i), A[i], h)[0]) ** 2
                    for i in range(A.size))
        assert float(r["loocv_score"]) == pytest.approx(brute, rel=1e-8)
    chosen = [float(r["h"]) for r in rows if r["chosen"] == "1"][0]
    assert f"chosen h = {chosen!r}" in capsys.readouterr().out


def test_bandwidth_single_candidate(points_csv, tmp_path):
    p, _, _ = points_csv
    out = tmp_path / "bw.csv"
    assert main(["bandwidth", "--input", str(p), *PT_FLAGS, "--grid", "0.5:0.5:1", "--out", str(out)]) == 0
    assert read_rows(out)[0]["chosen"] == "1"


def test_bandwidth_infeasible_and_empty(points_csv, tmp_path):
    p, _, _ = points_csv
    out = tmp_path / "bw.csv"
    assert main(["bandwidth", "--input", str(p), *PT_FLAGS, "--grid", "0.0001:0.0002:2",
                 "--out", str(out)]) == 3
    assert main(["bandwidth", "--input", str(p), *PT_FLAGS, "--grid", "1:0:3", "--out", str(out)]) == 2
    assert main(["bandwidth", "--input", str(p), *PT_FLAGS, "--grid", "0.1:0.2:0", "--out", str(out)]) == 2


def test_bandwidth_geometric_grid_on_pseudo_outcomes(sample_csv, tmp_path):
    out = tmp_path / "bw.csv"
    assert main(["bandwidth", "--input", str(sample_csv), *DATA_FLAGS, "--grid-geom", "0.05:1.0:20",
                 "--out", str(out)]) == 0
    assert len(read_rows(out)) == 20


# ---------------------------------------------------------------- simulate

def test_simulate_smoke_runtime_and_grid(tmp_path):
    out = tmp_path / "rmse_alpha.csv"
    t0 = time.perf_counter()
    assert main(["simulate", "--spec", str(CONFIGS / "rmse_alpha.cfg"), "--M", "1", "--out", str(out),
                 "--threads", "1"]) == 0
    assert time.perf_counter() - t0 < 10
    rows = read_results_csv(out)
    for est in ("plugin", "dr"):
        cells = [(r["n"], r["alpha"]) for r in rows if r["estimator"] == est]
        assert len(cells) == 2 * 11 and len(set(cells)) == 22
    assert sorted({r["alpha"] for r in rows}) == sorted(
        repr(round(0.1 + 0.03 * j, 12)) for j in range(11))


def test_simulate_same_seed_byte_identical(tmp_path):
    spec = tmp_path / "s.cfg"
    spec.write_text("simulation.n = 200\nsimulation.alpha = 0.1, 0.3\nsimulation.M = 3\n"
                    "simulation.estimators = plugin, dr, oracle\nsimulation.seed = 4\n")
    outs = []
    for t in (1, 2, 1):
        out = tmp_path / f"o{len(outs)}.csv"
        assert main(["simulate", "--spec", str(spec), "--threads", str(t), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_simulate_bad_spec(tmp_path):
    spec = tmp_path / "s.cfg"
    spec.write_text("simulation.n = 10\n")
    assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path / "x.csv")]) == 2
    spec.write_text("simulation.alpha = fast\n")
    assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path / "x.csv")]) == 2


def test_console_script_installed(tmp_path):
    exe = shutil.which("dose-dr")
    if exe is None:
        pytest.skip("console script not on PATH")
    res = subprocess.run([exe, "estimate", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--treatment" in res.stdout
    res = subprocess.run([exe, "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 2
