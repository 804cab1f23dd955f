from __future__ import annotations

import json
import math

import pytest

from qlbe.cli import main
from qlbe.config import HBAR, K_B, RunConfig
from qlbe.errors import ConfigError
from qlbe.scattering import ConstantLength, HardSphere

BASE = {"physics": {"gas": {"mass": 1.0}, "tracer": {"mass": 1.0}, "model": {"type": "ConstantLength", "a": 1.0}}}


def with_(**parts):
    cfg = json.loads(json.dumps(BASE))
    for k, v in parts.items():
        cfg[k] = v
    return cfg


def test_defaults_filled():
    cfg = RunConfig.from_dict(BASE)
    assert cfg.data["grid"]["n"] == 21
    assert cfg.model() == ConstantLength(1.0)
    assert cfg.tracer().mass_ratio == 1.0
    assert cfg.quadrature().n_quad is None
    assert cfg.tolerances()["trace"] == 1e-12


@pytest.mark.parametrize("path", [("gas", "mass"), ("tracer", "mass"), ("model", "type")])
def test_missing_required(path):
    cfg = json.loads(json.dumps(BASE))
    del cfg["physics"][path[0]][path[1]]
    with pytest.raises(ConfigError, match="missing"):
        RunConfig.from_dict(cfg)


def test_unknown_field():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict(with_(colour="blue"))


def test_unknown_model():
    cfg = with_()
    cfg["physics"]["model"] = {"type": "SoftSphere"}
    with pytest.raises(ConfigError):
        RunConfig.from_dict(cfg)


@pytest.mark.parametrize("bad", [
    {"grid": {"n": 20}},
    {"grid": {"extent_factor": 4.0}},
    {"seed": -1},
    {"workers": 0},
    {"tolerance_profile": "loose"},
    {"scenario": {"kind": "hot"}},
    {"scenario": {"offsets": [[1, 0]]}},
    {"kernel": {"deltas": [[0.5, 0, 0]]}},
    {"on_violation": "ignore"},
    {"schema_version": 2},
])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(with_(**bad))


def test_particle_minimum(tmp_path):
    cfg = with_(dsmc={"particles": 10})
    with pytest.raises(ConfigError, match="statistical minimum"):
        RunConfig.from_dict(cfg)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["dsmc", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_infinite_tracer_mass():
    cfg = with_()
    cfg["physics"]["tracer"]["mass"] = "inf"
    assert math.isinf(RunConfig.from_dict(cfg).tracer().mass)


def test_override():
    cfg = RunConfig.from_dict(BASE).override(seed=7, workers=None, output="x", tolerance_profile="strict")
    assert cfg.data["seed"] == 7
    assert cfg.data["workers"] == 1
    assert cfg.data["output"] == "x"
    assert cfg.tolerances()["trace"] == 1e-13
    with pytest.raises(ConfigError):
        RunConfig.from_dict(BASE).override(workers=-2)


def test_tolerance_overrides_merge():
    cfg = RunConfig.from_dict(with_(tolerances={"trace": 1e-15}))
    assert cfg.tolerances()["trace"] == 1e-15
    assert cfg.tolerances()["hermiticity"] == 1e-12


def test_si_conversion():
    m = 6.6e-27  # helium
    T = 300.0
    pressure = 1.0e-3
    a = 1.0e-10
    cfg = RunConfig.from_dict({
        "si": {"gas_mass_kg": m, "tracer_mass_kg": 10 * m, "temperature_K": T, "pressure_Pa": pressure,
               "length_m": {"R": a}},
        "physics": {"model": {"type": "HardSphere"}},
    })
    p0 = math.sqrt(2 * m * K_B * T)
    length = HBAR / p0
    gas = cfg.gas()
    assert gas.p_T == pytest.approx(1.0)
    assert cfg.tracer().mass == pytest.approx(10.0)
    assert gas.number_density == pytest.approx(pressure / (K_B * T) * length**3, rel=1e-12)
    assert cfg.model() == HardSphere(a / length)
    assert cfg.data["si_units"]["time_s"] == pytest.approx(HBAR * m / p0**2)


def test_si_incomplete():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"si": {"gas_mass_kg": 1e-27}, "physics": {"model": {"type": "ConstantLength"}}})


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_dumps_round_trip():
    cfg = RunConfig.from_dict(with_(seed=3))
    again = RunConfig.from_dict(json.loads(cfg.dumps()))
    assert again.data == cfg.data
