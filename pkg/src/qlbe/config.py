"""Run configuration: versioned JSON, validated in full before any computation.

Physics inputs are in internal units (hbar = k_B = 1, gas mass 1, p_T = 1 by
default).  An optional ``si`` block converts laboratory values once, here:

    {"si": {"gas_mass_kg": ..., "tracer_mass_kg": ..., "temperature_K": ...,
            "pressure_Pa": ..., "length_m": {"a": ...}}}

The internal unit of momentum is sqrt(2 m k_B T), of length hbar over that
momentum, and of energy p_T^2 / m = 2 k_B T.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .core import GasSpec, TracerSpec
from .errors import ConfigError
from .grid import MomentumGrid
from .kernels import QuadratureSpec
from .scattering import BornGaussian, BornTabulated, ConstantLength, HardSphere, ScatteringModel

SCHEMA_VERSION = 1

HBAR = 1.054571817e-34
K_B = 1.380649e-23

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "physics": {
        "gas": {"number_density": 1.0, "temperature": 0.5},
        "tracer": {},
        "model": {},
    },
    "grid": {"n": 21, "extent_factor": 5.0, "q_max": 4.0},
    "quadrature": {"n_quad": None, "cutoff": 6.0, "zero_cell": True, "zero_cell_order": 8, "route": "auto"},
    "scenario": {"kind": "cold", "width": 0.7, "offsets": [], "packet_width": 1.0, "kick": [0.0, 0.0, 0.0]},
    "integration": {"dt": None, "dt_factor": 0.05, "t_final": None, "collision_times": 30.0, "steps": None},
    "kernel": {"deltas": []},
    "dsmc": {"particles": 100000, "snapshots": [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 30.0], "shell_edges": None},
    "seed": 0,
    "workers": 1,
    "output": "qlbe_out",
    "tolerance_profile": "default",
    "tolerances": {},
    "on_violation": "raise",
}

REQUIRED = (("physics", "gas", "mass"), ("physics", "tracer", "mass"), ("physics", "model", "type"))

MODELS = {
    "ConstantLength": ConstantLength,
    "HardSphere": HardSphere,
    "BornGaussian": BornGaussian,
    "BornTabulated": BornTabulated,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def convert_si(raw: dict) -> dict:
    """Replace the ``si`` block by internal-unit physics entries."""
    si = raw.get("si")
    if not si:
        return raw
    try:
        m = float(si["gas_mass_kg"])
        M = si["tracer_mass_kg"]
        T = float(si["temperature_K"])
        pressure = float(si["pressure_Pa"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"incomplete si block: {exc}") from None
    if min(m, T, pressure) <= 0:
        raise ConfigError("si values must be positive")
    p0 = math.sqrt(2.0 * m * K_B * T)
    length = HBAR / p0
    time_unit = HBAR * m / p0**2
    out = copy.deepcopy(raw)
    phys = out.setdefault("physics", {})
    phys.setdefault("gas", {}).update(
        {"mass": 1.0, "temperature": 0.5, "number_density": pressure / (K_B * T) * length**3}
    )
    phys.setdefault("tracer", {})["mass"] = "inf" if M == "inf" else float(M) / m
    for name, value in (si.get("length_m") or {}).items():
        phys.setdefault("model", {})[name] = float(value) / length
    out["si_units"] = {"momentum_kg_m_s": p0, "length_m": length, "time_s": time_unit, "energy_J": p0**2 / m}
    del out["si"]
    return out


@dataclass
class RunConfig:
    data: dict

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = convert_si(raw)
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        cfg = cls(_merge(DEFAULTS, raw))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(raw)

    def override(self, **flags) -> "RunConfig":
        """Apply non-None CLI flags (seed, workers, output, tolerance_profile)."""
        data = copy.deepcopy(self.data)
        for k, v in flags.items():
            if v is not None:
                data[k] = v
        cfg = RunConfig(data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        d = self.data
        for path in REQUIRED:
            node = d
            for key in path:
                if not isinstance(node, dict) or key not in node:
                    raise ConfigError(f"missing required field {'.'.join(path)}")
                node = node[key]
        unknown = set(d) - set(DEFAULTS) - {"si_units"}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            self.gas()
            self.tracer()
            self.model()
            self.quadrature()
            self.grid().check_thermal_extent(self.gas(), self.tracer())
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if not isinstance(d["seed"], int) or not 0 <= d["seed"] < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not isinstance(d["workers"], int) or d["workers"] < 1:
            raise ConfigError("workers must be a positive integer")
        if d["tolerance_profile"] not in ("default", "strict"):
            raise ConfigError("tolerance_profile must be 'default' or 'strict'")
        if d["scenario"]["kind"] not in ("cold", "thermal", "pure"):
            raise ConfigError("scenario.kind must be cold, thermal or pure")
        if d["on_violation"] not in ("raise", "warn"):
            raise ConfigError("on_violation must be raise or warn")
        if int(d["dsmc"]["particles"]) < 10_000:
            raise ConfigError(f"dsmc.particles={d['dsmc']['particles']} is below the statistical minimum 10000")
        for off in list(d["scenario"]["offsets"]) + list(d["kernel"]["deltas"]):
            if len(off) != 3 or any(int(v) != v for v in off):
                raise ConfigError(f"offsets are integer triples in grid units, got {off}")

    # -- typed accessors ----------------------------------------------------

    def gas(self) -> GasSpec:
        g = self.data["physics"]["gas"]
        return GasSpec(mass=float(g["mass"]), number_density=float(g["number_density"]),
                       temperature=float(g["temperature"]))

    def tracer(self) -> TracerSpec:
        M = self.data["physics"]["tracer"]["mass"]
        M = math.inf if M in ("inf", None) or (isinstance(M, float) and math.isinf(M)) else float(M)
        return TracerSpec(mass=M, gas_mass=self.gas().mass)

    def model(self) -> ScatteringModel:
        spec = dict(self.data["physics"]["model"])
        kind = spec.pop("type")
        if kind not in MODELS:
            raise ValueError(f"unknown model type {kind!r}; choose from {sorted(MODELS)}")
        return MODELS[kind](**spec)

    def quadrature(self) -> QuadratureSpec:
        return QuadratureSpec(**self.data["quadrature"])

    def grid(self) -> MomentumGrid:
        g = self.data["grid"]
        return MomentumGrid.for_physics(int(g["n"]), self.gas(), self.tracer(), float(g["extent_factor"]),
                                        None if g["q_max"] is None else float(g["q_max"]) * self.gas().p_T)

    def tolerances(self) -> dict:
        base = dict(TOLERANCES[self.data["tolerance_profile"]])
        base.update(self.data["tolerances"])
        return base

    def physics_key(self) -> dict:
        """The inputs that determine kernel tables."""
        return {k: self.data[k] for k in ("physics", "grid", "quadrature")} | {"deltas": self.data["kernel"]["deltas"]}

    def dumps(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"


TOLERANCES = {
    "default": {
        "trace": 1e-12,
        "l1_growth": 1e-10,
        "hermiticity": 1e-12,
        "cauchy_schwarz": 1e-12,
        "diag_classical": 1e-8,
        "gallis_fleming": 1e-2,
        "gallis_fleming_exact": 1e-14,
        "born": 1e-14,
        "energy": 0.05,
        "entropy_growth": 1e-8,
        "rate_n21": 0.02,
        "rate_n31": 0.01,
        "grid_systematic": 0.02,
        "sigma_bands": 3.0,
        "richardson_center": 4.0,
        "richardson_halfwidth": 0.5,
        "positivity": 1e-10,
    },
    "strict": {
        "trace": 1e-13,
        "l1_growth": 1e-12,
        "hermiticity": 1e-14,
        "cauchy_schwarz": 1e-13,
        "diag_classical": 1e-10,
        "gallis_fleming": 5e-3,
        "gallis_fleming_exact": 1e-15,
        "born": 1e-15,
        "energy": 0.02,
        "entropy_growth": 1e-10,
        "rate_n21": 0.01,
        "rate_n31": 0.005,
        "grid_systematic": 0.01,
        "sigma_bands": 3.0,
        "richardson_center": 4.0,
        "richardson_halfwidth": 0.25,
        "positivity": 1e-12,
    },
}
