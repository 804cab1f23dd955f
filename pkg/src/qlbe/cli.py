"""Batch front-end: ``qlbe {kernel,evolve,classical,dsmc,verify} --config run.json``.

Every command validates the whole config first, echoes the effective config
to ``<out>/config.json`` and writes JSON with sorted keys and CSV with a
header row.  Exit code is 0 iff every executed check passed; configuration,
I/O and container errors exit with 2.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import acceptance, classical, evolution
from .config import RunConfig
from .container import load_table, save_state, save_table
from .core import mean_collision_rate
from .errors import ConfigError, ContainerError, MonitorViolation, QLBEError
from .kernels import invariant_scan, m_in, m_in_cl, tabulate

EXIT_ERROR = 2

__all__ = ["main", "build_parser", "load_or_build_tables"]


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _tag(offset) -> str:
    return "d" + "_".join(str(int(v)) for v in offset)


def _digest(data) -> str:
    return hashlib.sha256(json.dumps(_jsonable(data), sort_keys=True).encode()).hexdigest()


def _prepare(args) -> tuple[RunConfig, Path]:
    if args.config is None:
        raise ConfigError("--config is required (physics masses and model have no defaults)")
    cfg = RunConfig.load(args.config).override(
        seed=args.seed, workers=args.workers, output=args.out, tolerance_profile=args.tolerance_profile
    )
    out = Path(cfg.data["output"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return cfg, out


def _gamma(cfg: RunConfig) -> float:
    return mean_collision_rate(np.zeros(3), cfg.gas(), cfg.tracer(), cfg.model())


def load_or_build_tables(cfg: RunConfig, out: Path, offsets) -> tuple[dict, bool]:
    """Tables for the diagonal and ``offsets`` (grid units), cached under ``out/tables/<digest>``.

    A manifest records the physics digest and table checksums.  Matching
    tables are reloaded (a corrupted file raises ContainerError); otherwise
    everything is rebuilt.  Returns (tables by offset, reused flag).
    """
    offsets = sorted({tuple(int(v) for v in o) for o in offsets if any(o)})
    key = _digest({**cfg.physics_key(), "deltas": offsets})
    tdir = out / "tables" / key[:16]
    manifest_path = tdir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("key") == key:
            tables = {}
            for tag, entry in manifest["tables"].items():
                t = load_table(tdir / entry["file"])
                if t.checksum() != entry["checksum"]:
                    raise ContainerError(f"table {entry['file']} does not match its manifest checksum")
                tables[tuple(t.delta.tolist())] = t
            return tables, True
    grid = cfg.grid()
    tabs = tabulate(grid, [np.array(o) * grid.spacing for o in offsets], cfg.gas(), cfg.tracer(), cfg.model(),
                    cfg.quadrature())
    tdir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for t in tabs:
        tag = _tag(t.delta)
        save_table(tdir / f"kernel_{tag}.qlbe", t)
        entries[tag] = {"file": f"kernel_{tag}.qlbe", "checksum": t.checksum()}
    write_json(manifest_path, {"key": key, "tables": entries})
    return {tuple(t.delta.tolist()): t for t in tabs}, False


def _initial_state(cfg: RunConfig, grid) -> dict:
    sc = cfg.data["scenario"]
    gas, tracer = cfg.gas(), cfg.tracer()
    pt = gas.p_T
    if sc["kind"] == "thermal":
        return {(0, 0, 0): evolution.thermal_state(grid, gas, tracer)}
    if sc["kind"] == "cold":
        return {(0, 0, 0): evolution.gaussian_state(grid, float(sc["width"]) * pt,
                                                    np.asarray(sc["kick"], dtype=float) * pt)}
    # pure: two packets at +-kick (a single packet when kick = 0)
    k0 = np.asarray(sc["kick"], dtype=float) * pt
    s = float(sc["packet_width"]) * pt
    P = grid.points
    psi = np.exp(-np.sum((P - k0) ** 2, axis=1) / (2 * s * s))
    if np.any(k0):
        psi = psi + np.exp(-np.sum((P + k0) ** 2, axis=1) / (2 * s * s))
    return evolution.pure_state_sectors(grid, psi, sc["offsets"])


def _time_axis(cfg: RunConfig, diag_table) -> tuple[float, float]:
    it = cfg.data["integration"]
    rate = _gamma(cfg)
    if it["t_final"] is not None:
        t_final = float(it["t_final"])
    elif rate > 0:
        t_final = float(it["collision_times"]) / rate
    else:
        raise ConfigError("integration.t_final is required when the collision rate vanishes")
    if it["steps"] is not None:
        return t_final, t_final / int(it["steps"])
    if it["dt"] is not None:
        return t_final, float(it["dt"])
    top = float(np.max(diag_table.m_out))
    return t_final, (float(it["dt_factor"]) / top if top > 0 else t_final / 100.0)


def _stationary(cfg: RunConfig, grid):
    tracer = cfg.tracer()
    return None if math.isinf(tracer.mass) else evolution.thermal_state(grid, cfg.gas(), tracer)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_kernel(cfg: RunConfig, out: Path) -> int:
    deltas = cfg.data["kernel"]["deltas"]
    start = time.perf_counter()
    tables, reused = load_or_build_tables(cfg, out, deltas)
    tol = cfg.tolerances()
    summary_path = out / "kernel_summary.json"
    wanted = {k: tol[k] for k in ("hermiticity", "cauchy_schwarz", "diag_classical")}
    if reused and summary_path.exists():
        previous = json.loads(summary_path.read_text(encoding="utf-8"))
        if previous.get("tolerances") == wanted:
            print(f"tables up to date ({len(tables)} tables, checksums verified); skipped")
            return 0 if previous["passed"] else 1
    scan = invariant_scan(list(tables.values()), tol["hermiticity"], tol["cauchy_schwarz"])
    rng = np.random.default_rng(cfg.data["seed"])
    gas, tracer, model, quad = cfg.gas(), cfg.tracer(), cfg.model(), cfg.quadrature()
    resid = 0.0
    for _ in range(20):
        P = rng.normal(0.0, gas.p_T, 3)
        Q = rng.normal(0.0, gas.p_T, 3)
        a = m_in(P, P, Q, gas, tracer, model, quad)
        b = m_in_cl(P, Q, gas, tracer, model, quad)
        if b != 0:
            resid = max(resid, abs(a - b) / abs(b))
    passed = scan["ok"] and resid <= tol["diag_classical"]
    summary = {
        "tables": {_tag(k): t.metadata["checksum"] for k, t in sorted(tables.items())},
        "grid": cfg.grid().spec(),
        "route": next(iter(tables.values())).metadata["route"],
        "scan": scan,
        "diagonal_vs_classical": resid,
        "tolerances": wanted,
        "passed": passed,
    }
    write_json(summary_path, summary)
    print(f"kernel: {len(tables)} tables in {time.perf_counter() - start:.1f} s; "
          f"hermiticity {scan['hermiticity']:.2e}, cauchy-schwarz excess {scan['cauchy_schwarz_excess']:.2e}, "
          f"diagonal vs classical {resid:.2e}: {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


def cmd_evolve(cfg: RunConfig, out: Path) -> int:
    grid = cfg.grid()
    initial = _initial_state(cfg, grid)
    tables, _ = load_or_build_tables(cfg, out, list(initial))
    t_final, dt = _time_axis(cfg, tables[(0, 0, 0)])
    tol = cfg.tolerances()
    mt = evolution.MonitorTolerances(trace=tol["trace"], l1_growth=tol["l1_growth"],
                                     entropy_growth=tol["entropy_growth"], positivity=tol["positivity"])
    stationary = _stationary(cfg, grid)
    try:
        res = evolution.evolve(initial, {k: tables[k] for k in initial}, t_final, dt, cfg.tracer(), stationary,
                               mt, cfg.data["on_violation"], positivity_every=1 if len(initial) > 1 else 0,
                               csv_path=out / "monitors.csv")
    except MonitorViolation as exc:
        write_json(out / "violation.json", {"message": str(exc), "diagnostic": exc.diagnostic})
        print(f"monitor violation: {exc} {json.dumps(_jsonable(exc.diagnostic), sort_keys=True)}", file=sys.stderr)
        return 1
    sdir = out / "states"
    sdir.mkdir(exist_ok=True)
    for k, st in res.states.items():
        save_state(sdir / f"state_{_tag(k)}.qlbe", st)
    last = res.records[-1]
    target = 1.5 * cfg.gas().temperature
    times = res.column("time")
    rates = {}
    for k in res.states:
        if any(k):
            rate, resid = evolution.fit_decay_rate(times, res.column(f"l1[{_tag(k)}]"))
            rates[_tag(k)] = {"rate": rate, "fit_residual": resid,
                              "exponential": bool(resid < 0.02) if math.isfinite(resid) else False}
    summary = {
        "t_final": t_final,
        "dt": dt,
        "steps": len(res.records) - 1,
        "final_trace": last["trace"],
        "leakage": last["leakage"],
        "energy_start": res.records[0]["energy"],
        "energy_end": last["energy"],
        "energy_target": target,
        "energy_relative_error": abs(last["energy"] - target) / target,
        "entropy_end": last["entropy"],
        "decoherence_rates": rates,
        "min_minor": min((r["min_minor"] for r in res.records if "min_minor" in r), default=None),
        "violations": res.violations,
        "passed": not res.violations,
    }
    write_json(out / "summary.json", summary)
    print(f"evolve: {summary['steps']} steps to t={t_final:.4g}; trace {last['trace']:.15f}, "
          f"energy {last['energy']:.6g} (target {target:.6g}), violations {len(res.violations)}")
    return 0 if not res.violations else 1


def cmd_classical(cfg: RunConfig, out: Path) -> int:
    grid = cfg.grid()
    w = _initial_state(cfg, grid)[(0, 0, 0)]
    tables, _ = load_or_build_tables(cfg, out, [])
    table = tables[(0, 0, 0)]
    t_final, dt = _time_axis(cfg, table)
    tracer = cfg.tracer()
    n_steps = int(math.ceil(t_final / dt - 1e-9))
    rows = [(0.0, w.trace(), w.energy(tracer), w.mean_modulus())]
    for i in range(n_steps):
        h = min(dt, t_final - i * dt)
        w = classical.lbe_step(w, table, h)
        rows.append((w.time, w.trace(), w.energy(tracer), w.mean_modulus()))
    write_csv(out / "classical_monitors.csv", ("time", "trace", "energy", "mean_modulus"), rows)
    save_state(out / "classical_state.qlbe", w)
    drift = max(abs(r[1] - rows[0][1]) for r in rows)
    passed = drift <= max(cfg.tolerances()["trace"] * n_steps, 1e-12)
    write_json(out / "classical_summary.json", {"steps": n_steps, "dt": dt, "t_final": t_final, "trace_drift": drift,
                                                "energy_end": rows[-1][2], "passed": passed})
    print(f"classical: {n_steps} steps, trace drift {drift:.2e}, energy {rows[-1][2]:.6g}")
    return 0 if passed else 1


def _grid_path(w, table, times):
    """Diagonal grid trajectory through ``times`` with steps no larger than dt_max."""
    out = []
    t = 0.0
    limit = evolution.dt_max(table)
    for ts in times:
        span = ts - t
        if span > 0:
            k = max(1, int(math.ceil(span / limit - 1e-12)))
            for _ in range(k):
                w = classical.lbe_step(w, table, span / k)
        t = ts
        out.append(w)
    return out


def cmd_dsmc(cfg: RunConfig, out: Path) -> int:
    grid = cfg.grid()
    gas, tracer, model = cfg.gas(), cfg.tracer(), cfg.model()
    w0 = _initial_state(cfg, grid)[(0, 0, 0)]
    ds = cfg.data["dsmc"]
    rate = _gamma(cfg)
    if rate <= 0:
        raise ConfigError("dsmc needs a positive collision rate")
    times = np.array(sorted(float(s) / rate for s in ds["snapshots"]))
    # particles sample the continuous initial density; the grid holds its point values
    sc = cfg.data["scenario"]
    if sc["kind"] == "pure":
        raise ConfigError("dsmc runs cold or thermal scenarios (the particle oracle is diagonal only)")
    if sc["kind"] == "cold":
        center = np.asarray(sc["kick"], dtype=float) * gas.p_T
        sd = float(sc["width"]) * gas.p_T / math.sqrt(2.0)
    else:
        center, sd = np.zeros(3), tracer.thermal_momentum(gas) / math.sqrt(2.0)
    ens = classical.sample_gaussian_ensemble(center, sd, int(ds["particles"]), cfg.data["seed"])
    res = classical.dsmc_run(ens, times, gas, tracer, model, cfg.data["seed"], cfg.data["workers"])
    tables, _ = load_or_build_tables(cfg, out, [])
    path = _grid_path(w0, tables[(0, 0, 0)], times)
    edges = (np.asarray(ds["shell_edges"], dtype=float) if ds["shell_edges"] is not None
             else np.arange(0.0, grid.half_width + 1e-9 * grid.spacing, grid.spacing))
    tol = cfg.tolerances()
    mom = res.moments(tracer)
    hist_rows = []
    zs = []
    for ts, P, w in zip(times, res.snapshots, path):
        counts = classical.radial_histogram(P, edges)
        p_grid = classical.grid_shell_density(w, edges)
        z = classical.shell_z_scores(P, w, edges, tol["grid_systematic"])
        for b in range(edges.size - 1):
            hist_rows.append((ts, edges[b], edges[b + 1], int(counts[b]), counts[b] / P.shape[0], p_grid[b], z[b]))
        zs.append(z)
    zs = np.concatenate(zs)
    write_csv(out / "dsmc_histogram.csv",
              ("time", "shell_lo", "shell_hi", "count", "probability", "grid_probability", "z"), hist_rows)
    moment_rows = []
    worst = 0.0
    for i, (ts, w) in enumerate(zip(times, path)):
        ge, ga = w.energy(tracer), w.mean_modulus()
        for val, err, ref in ((mom["energy"][i], mom["energy_err"][i], ge), (mom["modulus"][i], mom["modulus_err"][i], ga)):
            worst = max(worst, abs(val - ref) / (tol["grid_systematic"] * abs(ref) + tol["sigma_bands"] * err))
        moment_rows.append((ts, mom["energy"][i], mom["energy_err"][i], ge, mom["modulus"][i], mom["modulus_err"][i], ga))
    write_csv(out / "dsmc_moments.csv", ("time", "energy", "energy_err", "grid_energy", "modulus", "modulus_err",
                                         "grid_modulus"), moment_rows)
    within = float(np.mean(np.abs(zs) < tol["sigma_bands"]))
    passed = within >= 0.95 and worst <= 1.0
    report = {
        "particles": ens.size,
        "snapshots": times,
        "collisions": res.collisions,
        "candidates": res.candidates,
        "max_abs_z": float(np.max(np.abs(zs))),
        "fraction_within_bands": within,
        "moment_band_ratio": worst,
        "passed": passed,
    }
    write_json(out / "dsmc_report.json", report)
    print(f"dsmc: {ens.size} particles, {res.collisions} collisions; max |z| {report['max_abs_z']:.2f}, "
          f"{100 * within:.1f}% of bins within bands, moment ratio {worst:.2f}: {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


def cmd_verify(cfg: RunConfig, out: Path, only=None) -> int:
    ctx = acceptance.Context(cfg.tolerances(), seed=cfg.data["seed"], workers=cfg.data["workers"],
                             particles=int(cfg.data["dsmc"]["particles"]))
    results = acceptance.run_all(ctx, only)
    failures = sum(not r.passed for r in results)
    write_json(out / "verify_report.json", {
        "tolerance_profile": cfg.data["tolerance_profile"],
        "criteria": [r.as_dict() for r in results],
        "failures": failures,
    })
    print(f"verify: {len(results) - failures}/{len(results)} criteria passed")
    return failures


COMMANDS = {"kernel": cmd_kernel, "evolve": cmd_evolve, "classical": cmd_classical, "dsmc": cmd_dsmc}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config 'output')")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed")
    common.add_argument("--workers", type=int, metavar="N", help="worker count")
    common.add_argument("--tolerance-profile", choices=("default", "strict"))
    parser = argparse.ArgumentParser(prog="qlbe", description="Quantum linear Boltzmann equation simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("kernel", parents=[common], help="tabulate kernel tables and scan their invariants")
    sub.add_parser("evolve", parents=[common], help="evolve the density matrix with monitors")
    sub.add_parser("classical", parents=[common], help="classical linear Boltzmann grid run")
    sub.add_parser("dsmc", parents=[common], help="particle simulation compared against the grid")
    v = sub.add_parser("verify", parents=[common], help="run the acceptance criteria")
    v.add_argument("--only", metavar="IDS", help="comma-separated criteria, e.g. AC-4,AC-11")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out = _prepare(args)
        if args.command == "verify":
            only = None
            if args.only:
                only = [s.strip() for s in args.only.split(",")]
                unknown = [s for s in only if s not in acceptance.FUNCTIONS]
                if unknown:
                    raise ConfigError(f"unknown criteria {unknown}")
            return cmd_verify(cfg, out, only)
        return COMMANDS[args.command](cfg, out)
    except (QLBEError, ValueError) as exc:
        print(f"qlbe {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
