from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from qlbe.cli import main

PHYSICS = {"gas": {"mass": 1.0}, "tracer": {"mass": 1.0}, "model": {"type": "ConstantLength", "a": 1.0}}


def write_config(tmp_path, name="run.json", **parts):
    cfg = {"physics": json.loads(json.dumps(PHYSICS)), "grid": {"n": 9}}
    for k, v in parts.items():
        if k == "physics":
            cfg["physics"].update(v)
        else:
            cfg[k] = v
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(cmd, config, out, *extra):
    return main([cmd, "--config", str(config), "--out", str(out), *extra])


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "qlbe.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("kernel", "evolve", "classical", "dsmc", "verify"):
        assert name in res.stdout


def test_config_required(tmp_path):
    assert main(["kernel", "--out", str(tmp_path)]) == 2


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path)
    assert run("kernel", cfg, blocker / "sub") == 2


def test_kernel_writes_and_skips(tmp_path, capsys):
    cfg = write_config(tmp_path, kernel={"deltas": [[1, 0, 0], [-1, 0, 0]]})
    out = tmp_path / "o"
    assert run("kernel", cfg, out) == 0
    summary = read_json(out / "kernel_summary.json")
    assert summary["passed"]
    assert set(summary["tables"]) == {"d0_0_0", "d1_0_0", "d-1_0_0"}
    assert summary["scan"]["ok"]
    tables = list((out / "tables").glob("*/kernel_*.qlbe"))
    assert len(tables) == 3
    assert read_json(out / "config.json")["grid"]["n"] == 9
    capsys.readouterr()
    assert run("kernel", cfg, out) == 0
    assert "skipped" in capsys.readouterr().out


def test_corrupted_table_fails(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "o"
    assert run("kernel", cfg, out) == 0
    path = next((out / "tables").glob("*/kernel_d0_0_0.qlbe"))
    raw = bytearray(path.read_bytes())
    raw[-40] ^= 0xFF
    path.write_bytes(bytes(raw))
    assert run("kernel", cfg, out) != 0


def test_evolve_thermal_is_quiet(tmp_path):
    cfg = write_config(tmp_path, scenario={"kind": "thermal"}, integration={"collision_times": 2})
    out = tmp_path / "o"
    assert run("evolve", cfg, out) == 0
    rows = read_csv(out / "monitors.csv")
    energy = [float(r["energy"]) for r in rows]
    assert max(energy) - min(energy) < 1e-12
    summary = read_json(out / "summary.json")
    assert abs(summary["final_trace"] - 1.0) < 1e-12
    assert summary["entropy_end"] < 1e-12
    assert (out / "states" / "state_d0_0_0.qlbe").exists()


def test_evolve_cold_reaches_equipartition(tmp_path):
    cfg = write_config(tmp_path, grid={"n": 13}, integration={"dt_factor": 0.1})
    out = tmp_path / "o"
    assert run("evolve", cfg, out) == 0
    summary = read_json(out / "summary.json")
    assert summary["energy_start"] < 0.6 * summary["energy_target"]
    assert summary["energy_relative_error"] < 0.05
    assert summary["passed"]


def test_evolve_zero_density_constant(tmp_path):
    cfg = write_config(tmp_path, physics={"gas": {"mass": 1.0, "number_density": 0.0}},
                       scenario={"kind": "pure", "offsets": [[1, 0, 0]], "kick": [0.5, 0, 0]},
                       integration={"t_final": 1.0, "dt": 0.1})
    out = tmp_path / "o"
    assert run("evolve", cfg, out) == 0
    rows = read_csv(out / "monitors.csv")
    assert len(rows) == 11
    for name in ("trace", "energy", "l1[d1_0_0]", "l2[d1_0_0]"):
        vals = [float(r[name]) for r in rows]
        assert max(vals) - min(vals) < 1e-14, name


def test_evolve_needs_t_final_without_collisions(tmp_path):
    cfg = write_config(tmp_path, physics={"gas": {"mass": 1.0, "number_density": 0.0}})
    assert run("evolve", cfg, tmp_path / "o") == 2


def test_evolve_pure_reports_decoherence(tmp_path):
    cfg = write_config(tmp_path, scenario={"kind": "pure", "offsets": [[2, 0, 0], [-2, 0, 0]], "kick": [0.6, 0, 0]},
                       integration={"collision_times": 1})
    out = tmp_path / "o"
    assert run("evolve", cfg, out) == 0
    summary = read_json(out / "summary.json")
    assert set(summary["decoherence_rates"]) == {"d2_0_0", "d-2_0_0"}
    assert summary["decoherence_rates"]["d2_0_0"]["rate"] > 0
    assert summary["min_minor"] >= -1e-10


def test_reruns_are_bytewise_identical(tmp_path):
    cfg = write_config(tmp_path, scenario={"kind": "pure", "offsets": [[1, 0, 0]], "kick": [0.5, 0, 0]},
                       integration={"collision_times": 1})
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("evolve", cfg, a) == 0
    assert run("evolve", cfg, b) == 0
    for name in ("monitors.csv", "summary.json", "states/state_d0_0_0.qlbe", "states/state_d1_0_0.qlbe"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "monitors.csv").read_bytes().split(b"\n")[0].endswith(b"\r")


def test_monitor_violation_exits_one(tmp_path):
    cfg = write_config(tmp_path, tolerances={"trace": -1.0}, integration={"steps": 3, "t_final": 0.003})
    out = tmp_path / "o"
    assert run("evolve", cfg, out) == 1
    diag = read_json(out / "violation.json")
    assert diag["diagnostic"]["check"] == "trace"


def test_classical_run(tmp_path):
    cfg = write_config(tmp_path, integration={"collision_times": 2})
    out = tmp_path / "o"
    assert run("classical", cfg, out) == 0
    summary = read_json(out / "classical_summary.json")
    assert summary["trace_drift"] < 1e-12
    rows = read_csv(out / "classical_monitors.csv")
    assert float(rows[-1]["energy"]) > float(rows[0]["energy"])


def test_dsmc_refuses_pure_scenario(tmp_path):
    cfg = write_config(tmp_path, scenario={"kind": "pure", "offsets": [[1, 0, 0]]})
    assert run("dsmc", cfg, tmp_path / "o") == 2


@pytest.mark.slow
def test_dsmc_agrees_with_grid(tmp_path):
    cfg = write_config(tmp_path, grid={"n": 21}, dsmc={"particles": 50000, "snapshots": [0.5, 2.0, 5.0]})
    verdicts = []
    for seed in (1, 2):
        out = tmp_path / f"o{seed}"
        assert run("dsmc", cfg, out, "--seed", str(seed)) == 0
        report = read_json(out / "dsmc_report.json")
        verdicts.append(report["passed"])
        assert report["fraction_within_bands"] >= 0.95
        rows = read_csv(out / "dsmc_histogram.csv")
        assert {"z", "grid_probability", "count"} <= set(rows[0])
    assert verdicts == [True, True]
    assert (tmp_path / "o1" / "dsmc_histogram.csv").read_bytes() != (tmp_path / "o2" / "dsmc_histogram.csv").read_bytes()


def test_verify_subset_schema_stable(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("verify", cfg, a, "--only", "AC-4,AC-11") == 0
    assert run("verify", cfg, b, "--only", "AC-4,AC-11") == 0
    ra, rb = read_json(a / "verify_report.json"), read_json(b / "verify_report.json")
    assert ra == rb
    assert ra["failures"] == 0
    assert [c["id"] for c in ra["criteria"]] == ["AC-4", "AC-11"]
    for c in ra["criteria"]:
        assert {"id", "name", "measured", "tolerance", "passed"} <= set(c)


def test_verify_unknown_criterion(tmp_path):
    assert run("verify", write_config(tmp_path), tmp_path / "o", "--only", "AC-99") == 2


@pytest.mark.slow
def test_verify_detects_tightened_trace(tmp_path):
    cfg = write_config(tmp_path, tolerances={"trace": 1e-15})
    out = tmp_path / "o"
    assert run("verify", cfg, out, "--only", "AC-1") == 1
    report = read_json(out / "verify_report.json")
    assert report["failures"] == 1
    assert report["criteria"][0]["passed"] is False
