"""Command-line interface tests (quick paths; heavy runs live in acceptance)."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from nicsim.cli import main

GOLDEN = Path(__file__).parent / "golden"


def run_cli(args):
    return main(args)


def test_unknown_subcommand_exits_nonzero():
    proc = subprocess.run(
        [sys.executable, "-m", "nicsim.cli", "frobnicate"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 1


def test_unknown_flag_exits_nonzero():
    proc = subprocess.run(
        [sys.executable, "-m", "nicsim.cli", "compare", "--warp", "9"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 1


def test_calibrate_writes_params_and_residuals(tmp_path):
    out = tmp_path / "fit.json"
    res = tmp_path / "residuals.csv"
    rc = run_cli(["calibrate", "--out", str(out), "--residuals", str(res)])
    assert rc == 0
    fitted = json.loads(out.read_text())
    assert fitted["t_poll"] == pytest.approx(57.08, abs=0.1)
    lines = res.read_text().strip().split("\n")
    assert lines[0] == "mode,B,given_mrps,fitted_mrps,rel_err"
    assert len(lines) == 9
    # held-out-style sanity: every shipped datapoint reproduced within 10%
    assert all(float(line.split(",")[4]) < 0.10 for line in lines[1:])


def test_calibrate_underdetermined(tmp_path):
    points = tmp_path / "points.json"
    points.write_text(json.dumps([{"mode": "doorbell", "B": 1, "mrps": 4.3}]))
    rc = run_cli(["calibrate", "--datapoints", str(points), "--out", str(tmp_path / "x.json")])
    assert rc == 1


def test_compare_matches_reference_fixture(tmp_path):
    out = tmp_path / "compare.csv"
    rc = run_cli(["compare", "--out", str(out)])
    assert rc == 0
    expected = (GOLDEN / "compare_reference.csv").read_text()
    assert out.read_text() == expected


def test_compare_tor_override_shifts_rtt(tmp_path):
    out_a = tmp_path / "a.csv"
    out_b = tmp_path / "b.csv"
    assert run_cli(["compare", "--out", str(out_a)]) == 0
    assert run_cli(["compare", "--tor", "0.1", "--out", str(out_b)]) == 0
    rtt_a = float(out_a.read_text().strip().split("\n")[-1].split(",")[3])
    rtt_b = float(out_b.read_text().strip().split("\n")[-1].split(",")[3])
    assert rtt_a - rtt_b == pytest.approx(0.4, abs=0.05)  # two hops of 0.2 us


def test_rawbus_deterministic_and_plateaus(tmp_path):
    out1, out2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    assert run_cli(["rawbus", "--threads", "1,4,8", "--out", str(out1)]) == 0
    assert run_cli(["rawbus", "--threads", "1,4,8", "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    rows = [line.split(",") for line in out1.read_text().strip().split("\n")[1:]]
    assert float(rows[-1][1]) == pytest.approx(80.0, rel=0.05)


def test_override_wire_latency(tmp_path):
    out = tmp_path / "sweep.csv"
    rc = run_cli([
        "sweep", "--modes", "coherent:B1", "--loads", "4",
        "--override", "cost_params.t_wire=1e-6",
        "--override", "duration_us=500", "--override", "warmup_us=50",
        "--out", str(out),
    ])
    assert rc == 0
    median = float(out.read_text().strip().split("\n")[1].split(",")[4])
    assert median == pytest.approx(1.904 - 0.6, abs=0.05)  # two hops removed


def test_override_bad_params_rejected(tmp_path):
    rc = run_cli(["rawbus", "--threads", "1", "--override", "cost_params.t_cl=0"])
    assert rc == 1


def test_scenario_file_input(tmp_path):
    scenario = {
        "nics": [{"id": 0, "config": {}}, {"id": 1, "config": {}}],
        "connections": [{"client_nic": 0, "server_nic": 1}],
        "loadgen": {"mode": "open_loop", "rate_mrps": 2.0},
        "duration_us": 400,
        "warmup_us": 40,
    }
    spath = tmp_path / "scenario.json"
    spath.write_text(json.dumps(scenario))
    out = tmp_path / "out.csv"
    rc = run_cli(["sweep", "--scenario", str(spath), "--modes", "coherent:B1",
                  "--loads", "2", "--out", str(out)])
    assert rc == 0
    assert out.read_text().startswith("mode,B,load_mrps,")


def test_invalid_scenario_gives_config_exit(tmp_path):
    spath = tmp_path / "bad.json"
    spath.write_text(json.dumps({"nics": [], "connections": []}))
    rc = run_cli(["sweep", "--scenario", str(spath), "--loads", "2"])
    assert rc == 1
