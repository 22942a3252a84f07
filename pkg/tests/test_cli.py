import csv
import subprocess
import sys

import numpy as np
import pytest

from fgp.cli import main
from fgp.data_io import load_generator, load_json


def _write(path, text):
    path.write_text(text)
    return str(path)


SIM_TOML = """
[data]
n = 5
periods = 160
seed = 7
drifts = [-0.003, -0.001, 0.0, 0.001, 0.003]
vols = [0.015, 0.015, 0.018, 0.02, 0.02]
"""

FIT_TOML = """
[problem]
history = "{hist}"
beta = 4.0
lambda = 0.001

[problem.partition]
kind = "uniform"
d = 17

[problem.regularizer]
kind = "l2_derivative"

[solver]
tolerance = 1e-8
"""


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _write(tmp / "sim.toml", SIM_TOML)
    out = tmp / "simrun"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    return tmp, out / "history.csv"


def test_simulate_writes_history_and_manifest(sim_dir):
    tmp, hist = sim_dir
    assert hist.is_file()
    manifest = load_json(hist.parent / "MANIFEST.json")
    assert manifest["command"] == "simulate"
    assert manifest["outputs"] == ["history.csv"]
    assert manifest["seed"] is None


def test_simulate_seed_override_changes_output(sim_dir, tmp_path):
    tmp, hist = sim_dir
    cfg = _write(tmp_path / "sim.toml", SIM_TOML)
    out = tmp_path / "s2"
    assert main(["simulate", "--config", cfg, "--out", str(out), "--seed", "9"]) == 0
    a = hist.read_text()
    b = (out / "history.csv").read_text()
    assert a != b


def test_fit_runs_and_is_replayable(sim_dir, tmp_path):
    tmp, hist = sim_dir
    cfg = _write(tmp_path / "fit.toml", FIT_TOML.format(hist=hist))
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["fit", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["fit", "--config", cfg, "--out", str(out2)]) == 0
    assert (out1 / "solution.json").read_text() == (out2 / "solution.json").read_text()
    rep = load_json(out1 / "solve_report.json")
    assert rep["converged"] and rep["kkt_residual"] <= 1e-8
    g, beta = load_generator(out1 / "solution.json")
    assert beta == 4.0
    # report command summarizes the run
    assert main(["report", "--out", str(out1)]) == 0
    assert (out1 / "report.txt").is_file()


def test_fit_missing_input_exits_1(tmp_path, capsys):
    cfg = _write(tmp_path / "fit.toml", FIT_TOML.format(hist="nonexistent.csv"))
    code = main(["fit", "--config", cfg, "--out", str(tmp_path / "out")])
    assert code == 1
    err = capsys.readouterr().err
    assert "nonexistent.csv" in err


def test_fit_degenerate_measure_returns_zero(tmp_path):
    # single-atom measure with uniform r: the optimum is the zero vector
    from fgp.data_io import save_measures
    from fgp.measures import EmpiricalMeasure
    meas = EmpiricalMeasure(np.array([[0.6, 0.4]]), np.array([[0.5, 0.5]]))
    save_measures([meas], tmp_path / "m.csv")
    cfg = _write(tmp_path / "fit.toml", """
[problem]
measure = "m.csv"
beta = 1.0
lambda = 1.0

[problem.partition]
kind = "explicit"
nodes = [0.0, 0.25, 0.5, 1.0]

[problem.regularizer]
kind = "l2_derivative"
""")
    out = tmp_path / "out"
    assert main(["fit", "--config", cfg, "--out", str(out), "--oracle"]) == 0
    g, _ = load_generator(out / "solution.json")
    assert np.max(np.abs(g.values)) <= 1e-6
    oracle = load_json(out / "oracle.json")
    assert abs(oracle["gap"]) <= 1e-3
    assert oracle["n_skipped"] > 0


def test_certify_command(sim_dir, tmp_path):
    tmp, hist = sim_dir
    fit_cfg = _write(tmp_path / "fit.toml", FIT_TOML.format(hist=hist))
    fit_out = tmp_path / "fit_out"
    assert main(["fit", "--config", fit_cfg, "--out", str(fit_out)]) == 0
    cert_cfg = _write(tmp_path / "cert.toml", f"""
[certify]
generator = "{fit_out / 'solution.json'}"
alpha = 0.9
""")
    cert_out = tmp_path / "cert_out"
    assert main(["certify", "--config", cert_cfg, "--out", str(cert_out)]) == 0
    rep = load_json(cert_out / "certification.json")
    assert rep["passed"] and rep["c1_gap_max"] <= 1e-10


def test_backtest_command(sim_dir, tmp_path):
    tmp, hist = sim_dir
    cfg = _write(tmp_path / "bt.toml", f"""
[backtest]
history = "{hist}"
rules = ["market", "equal"]
mode = "closed"
tc = [0.0, 0.003]
rebalance_every = 5
""")
    out = tmp_path / "bt_out"
    assert main(["backtest", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "backtest_market_tc0bp.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["relative_value"]) == 1.0 for r in rows)
    assert all(float(r["turnover"]) == 0.0 for r in rows)
    with open(out / "backtest_equal_tc30bp.csv") as fh:
        rows30 = list(csv.DictReader(fh))
    assert float(rows30[-1]["cum_costs"]) > 0.0


def test_backtest_open_mode_with_events(sim_dir, tmp_path):
    tmp, hist = sim_dir
    cfg = _write(tmp_path / "bt.toml", f"""
[backtest]
history = "{hist}"
rules = ["equal", "index_tracking"]
mode = "open"
n_top = 4
renewal_every = 40
rebalance_every = 5
tc = 0.0015
""")
    out = tmp_path / "bt_out"
    assert main(["backtest", "--config", cfg, "--out", str(out)]) == 0
    meta = load_json(out / "backtest_meta.json")
    assert "backtest_equal_tc15bp.csv" in meta
    with open(out / "backtest_index_tracking_tc15bp.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["relative_value"]) == 1.0 for r in rows)


def test_stability_command(sim_dir, tmp_path):
    tmp, hist = sim_dir
    cfg = _write(tmp_path / "st.toml", f"""
[stability]
history = "{hist}"
periods = 4

[problem]
beta = 4.0

[problem.partition]
kind = "uniform"
d = 9

[solver]
tolerance = 1e-8
""")
    out = tmp_path / "st_out"
    assert main(["stability", "--config", cfg, "--out", str(out), "--threads", "2"]) == 0
    with open(out / "w_rank.csv") as fh:
        rows = list(csv.reader(fh))
    W = np.array([[float(x) for x in row[1:]] for row in rows[1:]])
    assert W.shape == (4, 4)
    assert np.allclose(W, W.T) and np.all(np.diag(W) == 0.0)
    with open(out / "margins.csv") as fh:
        margins = list(csv.DictReader(fh))
    assert len(margins) == 6
    assert all(float(r["margin"]) >= -1e-6 for r in margins)
    assert (out / "w_name.csv").is_file()


def test_stability_identical_measures_zero_matrix(sim_dir, tmp_path):
    tmp, hist = sim_dir
    from fgp.data_io import load_history, save_measures
    from fgp.measures import from_market_sequence
    history, _ = load_history(hist)
    m = from_market_sequence(history.closed_weight_sequence()[:30])
    save_measures([m, m, m], tmp_path / "meas.csv")
    cfg = _write(tmp_path / "st.toml", """
[stability]
measures = "meas.csv"
""")
    out = tmp_path / "st_out"
    assert main(["stability", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "w_rank.csv") as fh:
        rows = list(csv.reader(fh))
    W = np.array([[float(x) for x in row[1:]] for row in rows[1:]])
    assert np.all(W == 0.0)


def test_backtest_rolling_refit(sim_dir, tmp_path):
    tmp, hist = sim_dir
    cfg = _write(tmp_path / "roll.toml", f"""
[backtest]
history = "{hist}"
rules = []
mode = "open"
n_top = 4
renewal_every = 30
rebalance_every = 5
tc = 0.0
train = 60
test = 40

[problem]
beta = 4.0
lambda = 0.001

[problem.partition]
kind = "uniform"
d = 13

[problem.regularizer]
kind = "l2_derivative"
""")
    out = tmp_path / "roll_out"
    assert main(["backtest", "--config", cfg, "--out", str(out)]) == 0
    meta = load_json(out / "backtest_meta.json")
    windows = meta["backtest_rolling_tc0bp.csv"]["windows"]
    assert len(windows) >= 2
    assert all(w["converged"] for w in windows)
    with open(out / "backtest_rolling_tc0bp.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["value"]) == 1.0
    assert len(rows) > 60


def test_fit_nonconvergence_exits_2(sim_dir, tmp_path, capsys):
    tmp, hist = sim_dir
    cfg = _write(tmp_path / "fit.toml", FIT_TOML.format(hist=hist)
                 + "max_outer = 2\n")
    code = main(["fit", "--config", cfg, "--out", str(tmp_path / "out")])
    assert code == 2
    assert "did not converge" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.toml", "[problem\nbeta = ")
    assert main(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert main(["fit", "--config", str(tmp_path / "missing.toml"),
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["certify", "--out", str(tmp_path / "o")]) == 1


def test_console_entry_point(sim_dir, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fgp.cli", "report",
                           "--out", str(tmp_path / "nothere")],
                          capture_output=True, text=True)
    assert proc.returncode == 1
