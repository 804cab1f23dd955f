"""Momentum-space evolution of the tracer density matrix, one coherence sector at a time.

A sector holds rho_Delta(P) = rho(P, P - Delta) for a fixed grid offset Delta.
The collision generator never couples different offsets, so every sector
evolves on its own table.  Time stepping is Strang splitting: half a free
phase, one RK4 collision step, half a free phase.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import GasSpec, TracerSpec
from .errors import GridMismatchError, MonitorViolation, StabilityError
from .grid import MomentumGrid
from .kernels import KernelTable

__all__ = [
    "MomentumGrid",
    "SectorState",
    "apply_generator",
    "free_phase",
    "step",
    "evolve",
    "entropy_monitor",
    "two_point_positivity",
    "dt_max",
    "thermal_state",
    "gaussian_state",
    "pure_state_sectors",
    "fit_decay_rate",
]

DT_SAFETY = 0.1  # dt_max = DT_SAFETY / max M_out
DT_DEFAULT = 0.05


@dataclass
class SectorState:
    """rho_Delta(P) on the grid; ``delta`` is the integer offset of Delta."""

    grid: MomentumGrid
    delta: np.ndarray
    rho: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.int64).reshape(3)
        rho = np.asarray(self.rho)
        if rho.shape != (self.grid.size,):
            raise GridMismatchError(f"sector field has shape {rho.shape}, grid needs ({self.grid.size},)")
        if self.is_diagonal:
            if np.iscomplexobj(rho):
                if np.any(rho.imag != 0):
                    raise ValueError("diagonal sector must be real")
                rho = rho.real
            rho = rho.astype(float)
        else:
            rho = rho.astype(np.complex128)
        self.rho = np.where(self.mask, rho, 0)

    @property
    def is_diagonal(self) -> bool:
        return not np.any(self.delta)

    @property
    def mask(self) -> np.ndarray:
        return self.grid.sector_mask(self.delta)

    def copy(self) -> "SectorState":
        return SectorState(self.grid, self.delta.copy(), self.rho.copy(), self.time)

    def trace(self) -> float:
        return float(np.sum(self.rho.real) * self.grid.cell_volume)

    def l1(self) -> float:
        return float(np.sum(np.abs(self.rho)) * self.grid.cell_volume)

    def l2(self) -> float:
        return float(math.sqrt(np.sum(np.abs(self.rho) ** 2) * self.grid.cell_volume))

    def energy(self, tracer: TracerSpec) -> float:
        """<P^2 / 2M> of a diagonal sector."""
        if math.isinf(tracer.mass):
            return 0.0
        p2 = np.sum(self.grid.points**2, axis=1)
        return float(np.sum(self.rho.real * p2) * self.grid.cell_volume / (2.0 * tracer.mass))

    def mean_modulus(self) -> float:
        p = np.linalg.norm(self.grid.points, axis=1)
        return float(np.sum(self.rho.real * p) * self.grid.cell_volume)


# ---------------------------------------------------------------------------
# initial states
# ---------------------------------------------------------------------------


def gaussian_state(grid: MomentumGrid, width: float, center=(0.0, 0.0, 0.0)) -> SectorState:
    """Diagonal sector with w ~ exp(-|P - center|^2 / width^2), normalized on the grid."""
    d2 = np.sum((grid.points - np.asarray(center, dtype=float)) ** 2, axis=1)
    w = np.exp(-d2 / width**2)
    return SectorState(grid, np.zeros(3), w / (np.sum(w) * grid.cell_volume))


def thermal_state(grid: MomentumGrid, gas: GasSpec, tracer: TracerSpec) -> SectorState:
    """Discretized Maxwell distribution of the tracer at the gas temperature."""
    if math.isinf(tracer.mass):
        raise ValueError("an infinitely heavy tracer has no thermal state")
    return gaussian_state(grid, tracer.thermal_momentum(gas))


def pure_state_sectors(grid: MomentumGrid, psi: np.ndarray, offsets) -> dict[tuple, SectorState]:
    """Sectors rho_Delta(P) = psi(P) conj psi(P - Delta) of the pure state ``psi``.

    ``psi`` is normalized here so that sum |psi|^2 h^3 = 1.  The diagonal
    sector is always included.
    """
    psi = np.asarray(psi, dtype=np.complex128)
    psi = psi / math.sqrt(np.sum(np.abs(psi) ** 2) * grid.cell_volume)
    out = {(0, 0, 0): SectorState(grid, np.zeros(3), np.abs(psi) ** 2)}
    idx = grid.index3
    n = grid.n
    for off in offsets:
        off = np.asarray(off, dtype=np.int64)
        if not np.any(off):
            continue
        src = idx - off
        ok = np.all((src >= 0) & (src < n), axis=1)
        rho = np.zeros(grid.size, dtype=np.complex128)
        s = grid.flat_index(src[ok])
        rho[ok] = psi[ok] * np.conj(psi[s])
        out[tuple(int(v) for v in off)] = SectorState(grid, off, rho)
    return out


# ---------------------------------------------------------------------------
# generator and stepping
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _generator(n, m, h3, lin, d0, d1, d2, T, Z, mo, rho, out):
    # rho is embedded in a zero-padded cube so off-grid sources read 0 without a branch
    npd = n + 2 * m
    pad = np.zeros(npd * npd * npd, dtype=rho.dtype)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                pad[((i + m) * npd + j + m) * npd + k + m] = rho[(i * n + j) * n + k]
    nq = lin.size
    for i in range(n):
        for j in range(n):
            for k in range(n):
                p = (i * n + j) * n + k
                bi = i - d0
                bj = j - d1
                bk = k - d2
                if bi < 0 or bi >= n or bj < 0 or bj >= n or bk < 0 or bk >= n:
                    out[p] = 0.0
                    continue
                base = ((i + m) * npd + j + m) * npd + k + m
                acc = 0.0 * rho[0]
                for q in range(nq):
                    acc += T[p, q] * pad[base - lin[q]]
                loss = 0.5 * (mo[p] + mo[(bi * n + bj) * n + bk])
                out[p] = h3 * acc + (Z[p] - loss) * rho[p]


def apply_generator(state: SectorState, table: KernelTable) -> np.ndarray:
    """d rho_Delta / dt from collisions (absorbing boundary: off-grid sources are 0)."""
    table.check_compatible(state.grid, state.delta)
    out = np.empty_like(state.rho)
    _run_generator(state.grid, state.delta, table, state.rho, out)
    return out


def _run_generator(grid, delta, table, rho, out):
    T = table.values
    Z = table.zero_cell
    if not np.iscomplexobj(rho):
        Z = Z.real
        T = T.real if np.iscomplexobj(T) else T
    elif np.iscomplexobj(T) != np.iscomplexobj(Z):
        Z = Z.astype(np.complex128)
    m, lin = _padded_offsets(grid)
    _generator(grid.n, m, grid.cell_volume, lin, int(delta[0]), int(delta[1]), int(delta[2]),
               T, Z, table.m_out, rho, out)


_PAD_CACHE: dict = {}


def _padded_offsets(grid: MomentumGrid):
    """Pad width and linear transfer offsets in the padded cube."""
    if grid not in _PAD_CACHE:
        off = grid.transfer_offsets.astype(np.int64)
        m = int(np.abs(off).max())
        npd = grid.n + 2 * m
        _PAD_CACHE[grid] = (m, np.ascontiguousarray((off[:, 0] * npd + off[:, 1]) * npd + off[:, 2]))
    return _PAD_CACHE[grid]


def phase_angles(grid: MomentumGrid, delta, tracer: TracerSpec) -> np.ndarray:
    """[P^2 - (P - Delta)^2] / (2M) per node, formed from exact integer coordinates."""
    if math.isinf(tracer.mass):
        return np.zeros(grid.size)
    c = grid.index3 - (grid.n - 1) // 2
    b = c - np.asarray(delta, dtype=np.int64)
    diff = np.sum(c * c, axis=1) - np.sum(b * b, axis=1)
    return diff * (grid.spacing**2 / (2.0 * tracer.mass))


def free_phase(state: SectorState, dt: float, tracer: TracerSpec) -> SectorState:
    """Exact free evolution rho_Delta(P) *= exp(-i [P^2 - (P-Delta)^2] dt / 2M)."""
    out = state.copy()  # the time stamp is advanced by step(), not here
    if not state.is_diagonal:
        out.rho = state.rho * np.exp(-1j * phase_angles(state.grid, state.delta, tracer) * dt)
    return out


def dt_max(table: KernelTable, safety: float = DT_SAFETY) -> float:
    top = float(np.max(table.m_out))
    return math.inf if top <= 0 else safety / top


def _rk4(grid, delta, table, rho, dt):
    k1 = np.empty_like(rho)
    _run_generator(grid, delta, table, rho, k1)
    k2 = np.empty_like(rho)
    _run_generator(grid, delta, table, rho + 0.5 * dt * k1, k2)
    k3 = np.empty_like(rho)
    _run_generator(grid, delta, table, rho + 0.5 * dt * k2, k3)
    k4 = np.empty_like(rho)
    _run_generator(grid, delta, table, rho + dt * k3, k4)
    return rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def collision_step(state: SectorState, table: KernelTable, dt: float) -> SectorState:
    """One RK4 step of the collision generator alone."""
    table.check_compatible(state.grid, state.delta)
    return SectorState(state.grid, state.delta, _rk4(state.grid, state.delta, table, state.rho, dt), state.time)


def step(state: SectorState, table: KernelTable, dt: float, tracer: TracerSpec,
         safety: float = DT_SAFETY) -> SectorState:
    """Strang step: half phase, RK4 collisions, half phase.  Refuses dt > dt_max."""
    bound = dt_max(table, safety)
    if dt > bound:
        raise StabilityError(dt, bound)
    table.check_compatible(state.grid, state.delta)
    rho = state.rho
    if not state.is_diagonal:
        half = np.exp(-0.5j * dt * phase_angles(state.grid, state.delta, tracer))
        rho = half * _rk4(state.grid, state.delta, table, half * rho, dt)
    else:
        rho = _rk4(state.grid, state.delta, table, rho, dt)
    return SectorState(state.grid, state.delta, rho, state.time + dt)


# ---------------------------------------------------------------------------
# monitors
# ---------------------------------------------------------------------------


def entropy_monitor(diagonal: SectorState, stationary: SectorState, tol: float = 1e-12) -> float:
    """Relative entropy sum w ln(w / w_st) h^3 (0 ln 0 = 0)."""
    if not (diagonal.is_diagonal and stationary.is_diagonal):
        raise ValueError("entropy needs diagonal sectors")
    if diagonal.grid != stationary.grid:
        raise GridMismatchError("entropy of sectors on different grids")
    w = diagonal.rho
    ws = stationary.rho
    if np.min(w) < -tol:
        raise MonitorViolation("negative probability in the diagonal sector",
                               {"min": float(np.min(w)), "index": int(np.argmin(w))})
    pos = w > 0
    if np.any(ws[pos] <= 0):
        raise ValueError("stationary state vanishes on the support of w")
    return float(np.sum(w[pos] * np.log(w[pos] / ws[pos])) * diagonal.grid.cell_volume)


def two_point_positivity(sectors, tol: float = 1e-10, samples: int | None = None,
                         rng: np.random.Generator | None = None) -> dict:
    """Smallest eigenvalue of [[w(P), rho(P)], [conj rho(P), w(P-Delta)]] over sampled P.

    ``sectors`` maps offsets (tuples) to states and must contain (0, 0, 0).
    All valid nodes are used unless ``samples`` is given.
    """
    sectors = dict(sectors)
    w = sectors[(0, 0, 0)].rho
    grid = sectors[(0, 0, 0)].grid
    worst = math.inf
    where = None
    checked = 0
    for key, st in sectors.items():
        if st.is_diagonal:
            continue
        idx = np.flatnonzero(st.mask)
        if samples is not None and samples < idx.size:
            idx = (rng or np.random.default_rng(0)).choice(idx, samples, replace=False)
        src = grid.flat_index(grid.index3[idx] - st.delta)
        a = w[idx]
        b = w[src]
        c2 = np.abs(st.rho[idx]) ** 2
        lam_max = 0.5 * (a + b) + np.sqrt(0.25 * (a - b) ** 2 + c2)
        with np.errstate(invalid="ignore", divide="ignore"):
            lam_min = np.where(lam_max > 0, (a * b - c2) / np.where(lam_max > 0, lam_max, 1.0), 0.0)
        checked += idx.size
        if idx.size and lam_min.min() < worst:
            worst = float(lam_min.min())
            where = {"delta": list(key), "node": int(idx[np.argmin(lam_min)])}
    if worst == math.inf:
        worst = 0.0
    return {"min_eigenvalue": worst, "location": where, "pairs": int(checked), "ok": bool(worst >= -tol)}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class MonitorTolerances:
    trace: float = 1e-12  # per step, diagonal sector
    l1_growth: float = 1e-10  # per step, coherence sectors
    entropy_growth: float = 1e-8
    negativity: float = 1e-12
    positivity: float = 1e-10


@dataclass
class EvolutionResult:
    records: list = field(default_factory=list)
    states: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])


def _record(t, sectors, tracer, stationary, tables, leak):
    rec = {"time": t}
    diag = sectors.get((0, 0, 0))
    if diag is not None:
        rec["trace"] = diag.trace()
        rec["energy"] = diag.energy(tracer)
        rec["mean_modulus"] = diag.mean_modulus()
        rec["entropy"] = entropy_monitor(diag, stationary) if stationary is not None else math.nan
        rec["leakage"] = leak
    for key, st in sectors.items():
        tag = "d" + "_".join(str(v) for v in key)
        rec[f"l1[{tag}]"] = st.l1()
        rec[f"l2[{tag}]"] = st.l2()
    return rec


def evolve(
    initial,
    tables,
    t_final: float,
    dt: float,
    tracer: TracerSpec,
    stationary: SectorState | None = None,
    tolerances: MonitorTolerances = MonitorTolerances(),
    on_violation: str = "raise",
    positivity_every: int = 0,
    csv_path=None,
    safety: float = DT_SAFETY,
) -> EvolutionResult:
    """Evolve every sector in ``initial`` (offset tuple -> state) to ``t_final``.

    ``tables`` maps the same keys to kernel tables.  One monitor record per
    step; ``leakage`` is the time-integrated rate toward off-grid targets
    (suppressed in the dynamics, reported here).  ``positivity_every > 0``
    checks two-point positivity every that many steps.
    """
    if on_violation not in ("raise", "warn"):
        raise ValueError("on_violation must be 'raise' or 'warn'")
    sectors = {tuple(int(v) for v in k): s.copy() for k, s in initial.items()}
    grids = {s.grid for s in sectors.values()}
    if len(grids) != 1:
        raise GridMismatchError("all sectors must share one grid")
    for k in sectors:
        if k not in tables:
            raise GridMismatchError(f"no table for sector {k}")
        tables[k].check_compatible(sectors[k].grid, np.asarray(k))
    n_steps = int(math.ceil(t_final / dt - 1e-9)) if t_final > 0 else 0
    result = EvolutionResult()
    leak = 0.0
    diag_table = tables.get((0, 0, 0))
    result.records.append(_record(0.0, sectors, tracer, stationary, tables, leak))

    def flag(kind, info):
        info = {"check": kind, **info}
        result.violations.append(info)
        if on_violation == "raise":
            raise MonitorViolation(f"monitor {kind} out of tolerance", info)
        warnings.warn(f"monitor {kind} out of tolerance: {info}", stacklevel=3)

    for it in range(n_steps):
        h = min(dt, t_final - it * dt) if it == n_steps - 1 else dt
        prev = result.records[-1]
        if diag_table is not None and (0, 0, 0) in sectors:
            w = sectors[(0, 0, 0)].rho
            rate_before = float(np.dot(diag_table.lost, w)) * sectors[(0, 0, 0)].grid.cell_volume
        for k in sectors:
            sectors[k] = step(sectors[k], tables[k], h, tracer, safety)
        if diag_table is not None and (0, 0, 0) in sectors:
            w = sectors[(0, 0, 0)].rho
            rate_after = float(np.dot(diag_table.lost, w)) * sectors[(0, 0, 0)].grid.cell_volume
            leak += 0.5 * h * (rate_before + rate_after)
        rec = _record((it + 1) * dt if it < n_steps - 1 else t_final, sectors, tracer, stationary, tables, leak)
        result.records.append(rec)
        if "trace" in rec:
            if abs(rec["trace"] - prev["trace"]) > tolerances.trace:
                flag("trace", {"step": it + 1, "before": prev["trace"], "after": rec["trace"]})
            wmin = float(np.min(sectors[(0, 0, 0)].rho))
            if wmin < -tolerances.negativity:
                flag("negativity", {"step": it + 1, "min": wmin})
            if stationary is not None and rec["entropy"] > prev["entropy"] + tolerances.entropy_growth:
                flag("entropy", {"step": it + 1, "before": prev["entropy"], "after": rec["entropy"]})
        for key in sectors:
            if key == (0, 0, 0):
                continue
            name = "l1[d" + "_".join(str(v) for v in key) + "]"
            if rec[name] > prev[name] + tolerances.l1_growth:
                flag("l1", {"step": it + 1, "sector": list(key), "before": prev[name], "after": rec[name]})
        if positivity_every and (it + 1) % positivity_every == 0 and (0, 0, 0) in sectors:
            rep = two_point_positivity(sectors, tolerances.positivity)
            rec["min_minor"] = rep["min_eigenvalue"]
            if not rep["ok"]:
                flag("positivity", {"step": it + 1, **rep})
    result.states = sectors
    if csv_path is not None:
        write_monitor_csv(csv_path, result.records)
    return result


def fit_decay_rate(times, values) -> tuple[float, float]:
    """Exponential fit values ~ A exp(-rate t): returns (rate, residual).

    The residual is the largest relative deviation of the fit from the data;
    it certifies (or not) that the decay is exponential.  Zero or negative
    values make the fit undefined and give (nan, nan).
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size < 2 or np.any(v <= 0):
        return math.nan, math.nan
    slope, icept = np.polyfit(t, np.log(v), 1)
    resid = float(np.max(np.abs(np.exp(icept + slope * t) / v - 1.0)))
    return float(-slope), resid


def write_monitor_csv(path, records) -> None:
    keys = []
    for r in records:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(keys)
        for r in records:
            writer.writerow([_fmt(r.get(k, "")) for k in keys])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
