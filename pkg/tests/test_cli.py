import json
import subprocess
import sys
from pathlib import Path

import pytest

from chainexit.cli import EXIT_BLOWUP, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from chainexit.montecarlo import ExitProblem, estimate_exit_probability
from oracles import lin2_action


def run(out, *args):
    return main([*args, "--out", str(out)])


def outputs(out: Path) -> dict:
    """Every file written except the manifests, which carry timestamps and argv."""
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if not p.name.startswith("manifest_")}


def manifest(out: Path, command: str) -> dict:
    return json.loads((out / f"manifest_{command}.json").read_text())


# ---------------------------------------------------------------- errors and exit codes

def test_missing_model_exits_2_with_usage():
    proc = subprocess.run([sys.executable, "-m", "chainexit.cli", "simulate"], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "usage:" in proc.stderr and "--model" in proc.stderr


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n": 2, "d": 1, "m": 1, "lambda_floor": 1.0, "drifts": ["0", "x1[0] +"],
                               "controls": [None, None], "sigma": "1"}))
    assert run(tmp_path / "a", "simulate", "--model", str(bad)) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert run(tmp_path / "b", "simulate", "--model", "no-such-model") == EXIT_CONFIG
    assert run(tmp_path / "c", "report", "--sweep", str(tmp_path / "missing.csv")) == EXIT_CONFIG
    assert run(tmp_path / "d", "estimate", "--model", "lin2", "--eps", "0.5", "--N", "10",
               "--domain", "{\"kind\": \"box\", \"lower\": [1.0], \"upper\": [-1.0]}") == EXIT_CONFIG


def test_blow_up_exits_3(tmp_path):
    cfg = tmp_path / "cubic.json"
    cfg.write_text(json.dumps({"n": 2, "d": 1, "m": 1, "lambda_floor": 1.0, "drifts": ["x1[0]^3", "x1[0]"],
                               "controls": [None, None], "sigma": "1"}))
    rc = run(tmp_path / "o", "estimate", "--model", str(cfg), "--eps", "25", "--N", "500", "--dt", "0.05",
             "--seed", "2", "--domain", "{\"kind\": \"box\", \"lower\": [-1e300], \"upper\": [1e300]}")
    assert rc == EXIT_BLOWUP
    assert manifest(tmp_path / "o", "estimate")["finished"]


def test_runtime_failure_exits_1(tmp_path):
    rc = run(tmp_path, "sweep", "--model", "lin2", "--eps", "0.05", "--N-min", "100", "--N-max", "500",
             "--dt", "0.01", "--i0", "1.5")
    assert rc == EXIT_RUNTIME


# ---------------------------------------------------------------- simulate

def test_simulate_noiseless_is_deterministic_trajectory(tmp_path):
    assert run(tmp_path, "simulate", "--model", "det-exit", "--eps", "0", "--paths", "1", "--dt", "0.01") == EXIT_OK
    rows = (tmp_path / "trajectory_0000.csv").read_text().splitlines()
    assert len(rows) == 102
    events = json.loads((tmp_path / "exits.json").read_text())["events"]
    assert events[0]["class"] == "gamma_plus"
    assert manifest(tmp_path, "simulate")["outputs"] == ["exits.json", "trajectory_0000.csv"]


def test_simulate_repeatable(tmp_path):
    args = ("simulate", "--model", "lin2", "--eps", "0.5", "--paths", "3", "--seed", "7", "--dt", "0.01")
    assert run(tmp_path / "a", *args) == EXIT_OK
    assert run(tmp_path / "b", *args) == EXIT_OK
    a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    assert len(a) == 4 and a == b
    assert manifest(tmp_path / "a", "simulate")["config_hash"] == manifest(tmp_path / "b", "simulate")["config_hash"]


# ---------------------------------------------------------------- worked examples

def test_estimate_example(tmp_path, lin2):
    assert run(tmp_path, "estimate", "--model", "lin2", "--eps", "0.5", "--N", "100000", "--seed", "1") == EXIT_OK
    got = json.loads((tmp_path / "estimate.json").read_text())
    ref = estimate_exit_probability(ExitProblem.from_model(lin2), 0.5, N=100_000, seed=1)
    assert got["q_hat"] == ref.q_hat and got["N"] == 100_000
    # PDE value at the origin on the 128^3 grid is about 0.021
    assert abs(got["q_hat"] - 0.021) <= max(0.02, 3 * got["stderr"])


def test_min_action_example_and_report(tmp_path):
    assert run(tmp_path / "act", "min-action", "--model", "lin2", "--restarts", "16") == EXIT_OK
    summary = json.loads((tmp_path / "act" / "action.json").read_text())
    assert summary["action"] == pytest.approx(lin2_action(1.0, 1.0), rel=1e-3) and summary["feasible"]
    assert (tmp_path / "act" / "action.csv").read_text().startswith("t,u_0,x1_0,x2_0")

    sweep = tmp_path / "sweep.csv"
    sweep.write_text("eps,N,q_hat,stderr,I_eps,ci_lo,ci_hi,I0,gap,usable\n"
                     "1.0,1000000,0.0846,0.00028,0,0,0,0,0,1\n"
                     "0.5,1000000,0.01500,0.00012,0,0,0,0,0,1\n"
                     "0.25,1000000,0.000588,0.000024,0,0,0,0,0,1\n")
    i0 = str(tmp_path / "act" / "action.json")
    assert run(tmp_path / "rep", "report", "--sweep", str(sweep), "--i0", i0) == EXIT_OK
    rep = json.loads((tmp_path / "rep" / "bounds_report.json").read_text())
    assert rep["verdict"] == "PASS" and rep["I0"] == summary["action"]
    assert run(tmp_path / "rep2", "report", "--sweep", str(sweep), "--i0", str(2 * summary["action"])) == EXIT_OK
    assert json.loads((tmp_path / "rep2" / "bounds_report.json").read_text())["verdict"] == "FAIL"
    header = (tmp_path / "rep" / "gap_vs_eps.csv").read_text().splitlines()[0]
    assert header == "eps,gap,half_width,I_eps,I0,usable"


# ---------------------------------------------------------------- determinism across worker counts

COMMANDS = {
    "simulate": ["--eps", "0.5", "--paths", "3", "--dt", "0.01"],
    "estimate": ["--eps", "0.5", "--N", "3000", "--dt", "0.01"],
    "delta-study": ["--eps", "0.5", "--N", "2000", "--dt", "0.01"],
    "solve-pde": ["--eps", "0.5", "--K", "16", "--residual"],
    "min-action": ["--M", "8", "--restarts", "3"],
    "dp-oracle": ["--K", "4", "16", "16"],
    "sweep": ["--eps", "1.0", "0.5", "--N-min", "1000", "--N-max", "5000", "--dt", "0.01", "--i0", "1.5"],
    "penalty-sweep": ["--eps", "0.5", "--M", "10", "50", "--N", "2000", "--dt", "0.01"],
    "validate": ["--samples", "256"],
}


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_outputs_identical_across_thread_counts(tmp_path, command):
    results = []
    for k in ("1", "4", "16"):
        out = tmp_path / k
        assert run(out, command, "--model", "lin2", "--seed", "5", "--threads", k, *COMMANDS[command]) == EXIT_OK
        results.append((outputs(out), manifest(out, command)))
    (files, man), *rest = results
    assert files
    assert sorted(files) == man["outputs"] or sorted(files) == sorted(man["outputs"])
    for other, other_man in rest:
        assert other == files
        assert other_man["config_hash"] == man["config_hash"]


def test_report_identical_across_thread_counts(tmp_path):
    assert run(tmp_path / "sw", "sweep", "--model", "lin2", "--seed", "5", *COMMANDS["sweep"]) == EXIT_OK
    got = []
    for k in ("1", "4", "16"):
        out = tmp_path / k
        rc = run(out, "report", "--sweep", str(tmp_path / "sw" / "sweep.csv"), "--threads", k)
        assert rc in (EXIT_OK, EXIT_RUNTIME)
        got.append((rc, outputs(out)))
    assert got[0] == got[1] == got[2]
