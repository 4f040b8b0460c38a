import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mofi_flr.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERIC,
    main,
    read_curves,
    read_dataset,
    write_curves,
)
from mofi_flr.metrics import read_results, summarize

SMALL_CV = """
[cv]
alpha_grid = [0.9999, 0.99999999]
theta_factors = [0.01]
n_lambda = 5
lambda_min_ratio = 0.01
m_grid = [6]
"""


def write_toml(path, text):
    path.write_text(text)
    return str(path)


def run(tmp_path, command, text, out="out", *extra):
    cfg = write_toml(tmp_path / f"{command}.toml", text)
    return main([command, "--config", cfg, "--out", str(tmp_path / out), *extra])


def test_simulate_defaults(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "d")]) == 0
    files = sorted((tmp_path / "d").glob("X_*.csv"))
    assert len(files) == 100
    x1 = np.loadtxt(tmp_path / "d" / "X_1.csv", delimiter=",")
    assert x1.shape == (125, 100)
    assert np.loadtxt(tmp_path / "d" / "y.csv", delimiter=",").shape == (125,)
    truth = json.loads((tmp_path / "d" / "truth.json").read_text())
    assert truth["config"]["p"] == 100


def test_simulate_is_byte_identical(tmp_path):
    text = "[simulate]\nn = 20\np = 5\nq = 2\nN = 30\nn_test = 10\n"
    for name in ("a", "b"):
        assert run(tmp_path, "simulate", text, name, "--seed", "11") == 0
    for f in sorted((tmp_path / "a").rglob("*.*")):
        rel = f.relative_to(tmp_path / "a")
        assert f.read_bytes() == (tmp_path / "b" / rel).read_bytes()
    x, y = read_dataset(tmp_path / "a" / "test")
    assert x.shape == (5, 10, 30) and y.shape == (10,)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    text = "[simulate]\nn = 80\np = 6\nq = 2\nq0 = 1\nN = 40\nn_test = 100\n"
    assert run(root, "simulate", text, "d", "--seed", "5") == 0
    return root / "d"


def test_fit_round_trip_and_evaluate(tmp_path, dataset):
    text = f'[fit]\ndata = "{dataset}"\nstrategy = "optim"\n' + SMALL_CV
    assert run(tmp_path, "fit", text, "fit", "--verbose") == 0
    result = json.loads((tmp_path / "fit" / "result.json").read_text())
    assert set(result["simple"]) | set(result["complex"]) == set(result["selected"])
    assert all(1 <= j <= 6 for j in result["selected"])
    beta, beta0, beta1 = read_curves(tmp_path / "fit" / "curves.csv")
    assert beta.shape == (6, 40)
    np.testing.assert_allclose(beta0 + beta1, beta, atol=1e-12)
    ev = (f'[evaluate]\nresult = "{tmp_path / "fit"}"\ntruth = "{dataset / "truth.json"}"\n'
          f'test = "{dataset / "test"}"\n')
    assert run(tmp_path, "evaluate", ev, "ev") == 0
    report = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    assert set(report) == {"rer", "fpr", "fnr", "r01", "r10", "rmse", "relative_rmse", "pearson"}
    assert 0 <= report["rer"] < 1


def test_curves_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    b0, b1 = rng.standard_normal((2, 3, 7))
    write_curves(tmp_path / "c.csv", b0 + b1, b0, b1)
    beta, r0, r1 = read_curves(tmp_path / "c.csv")
    np.testing.assert_array_equal(beta, b0 + b1)
    np.testing.assert_array_equal(r0, b0)


def test_huge_penalty_gives_null_model(tmp_path, dataset, caplog):
    text = f'[fit]\ndata = "{dataset}"\nlambda1 = 1e6\nlambda2 = 1e-6\ntheta = 1e-6\n'
    assert run(tmp_path, "fit", text, "fit") == 0
    result = json.loads((tmp_path / "fit" / "result.json").read_text())
    assert result["null_model"] is True and result["selected"] == []
    assert any("no predictor selected" in r.message for r in caplog.records)
    beta, _, _ = read_curves(tmp_path / "fit" / "curves.csv")
    assert np.all(beta == 0.0)


def test_cv_writes_surface(tmp_path, dataset):
    text = f'[fit]\ndata = "{dataset}"\n' + SMALL_CV
    assert run(tmp_path, "cv", text, "cv") == 0
    rec = json.loads((tmp_path / "cv" / "tuning.json").read_text())["record"]
    rows = list(csv.DictReader(open(tmp_path / "cv" / "cv_surface.csv")))
    assert len(rows) == 10
    assert min(float(r["cv_error"]) for r in rows) == pytest.approx(rec["cv_error"])


def test_too_many_simple_parameters_exit_code(tmp_path):
    sim = "[simulate]\nn = 10\np = 8\nq = 4\nN = 30\nn_test = 0\nscenario = \"III\"\n"
    assert run(tmp_path, "simulate", sim, "d") == 0
    text = (f'[fit]\ndata = "{tmp_path / "d"}"\nlambda1 = 1e-9\nlambda2 = 1e-9\ntheta = 1e-6\n'
            '[fit.kernel]\nkind = "sobolev"\nscenario = "III"\n')
    assert run(tmp_path, "fit", text, "fit") == EXIT_NUMERIC
    err = json.loads((tmp_path / "fit" / "error.json").read_text())
    assert err["exit_code"] == EXIT_NUMERIC


def test_config_errors(tmp_path, dataset):
    assert run(tmp_path, "fit", f'[fit]\ndata = "{dataset}"\nlamda1 = 0.1\n', "a") == EXIT_CONFIG
    assert json.loads((tmp_path / "a" / "error.json").read_text())["error"] == "config"
    assert run(tmp_path, "bench", "[bench]\nmethods = []\n", "b") == EXIT_CONFIG
    assert run(tmp_path, "bench", "[bench]\nmethods = [\"lasso\"]\n", "c") == EXIT_CONFIG
    assert run(tmp_path, "fit", '[fit]\ndata = "/nonexistent/dir"\n', "d") == EXIT_IO
    assert main(["fit", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "e")]) == EXIT_IO


BENCH = """
[simulate]
p = 5
q = 2
N = 30
n_test = 100
[bench]
replicates = {reps}
n = [60]
sigma = [1.0]
scenarios = ["I"]
""" + SMALL_CV


def test_bench_single_replicate_summary_equals_row(tmp_path):
    assert run(tmp_path, "bench", BENCH.format(reps=1), "b") == 0
    rows = read_results(tmp_path / "b" / "results.csv")
    summary = list(csv.DictReader(open(tmp_path / "b" / "summary.csv")))
    assert len(rows) == 4 and len(summary) == 4
    for row, s in zip(sorted(rows, key=lambda r: r["method"]), sorted(summary, key=lambda r: r["method"])):
        assert float(s["rer_mean"]) == row["rer"] == float(s["rer_q05"])
        assert int(s["count"]) == 1


def test_bench_threads_are_reproducible(tmp_path):
    text = BENCH.format(reps=2)
    assert run(tmp_path, "bench", text, "t1", "--threads", "1") == 0
    assert run(tmp_path, "bench", text, "t2", "--threads", "2") == 0
    a = (tmp_path / "t1" / "results.csv").read_bytes()
    assert a == (tmp_path / "t2" / "results.csv").read_bytes()
    rows = read_results(tmp_path / "t1" / "results.csv")
    recomputed = summarize(rows)
    written = list(csv.DictReader(open(tmp_path / "t1" / "summary.csv")))
    for s, w in zip(recomputed, written):
        assert float(w["rer_mean"]) == s["rer_mean"]
        assert float(w["fpr_mean"]) == s["fpr_mean"]
    assert json.loads((tmp_path / "t1" / "failures.json").read_text()) == []


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mofi_flr.cli", "simulate", "--out", str(tmp_path / "s"),
                           "--seed", "1"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout.strip().splitlines()[-1])["predictors"] == 100
