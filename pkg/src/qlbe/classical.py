"""Classical linear Boltzmann oracles: a grid stepper and a DSMC particle sampler.

The grid stepper integrates dw/dt = sum_Q M_in^cl(P; Q) w(P - Q) h^3 - M_out^cl(P) w(P)
in pair form (each flow is added to its target and removed from its source), a loop
structure independent of :func:`qlbe.evolution.apply_generator`.

The particle sampler realizes the jump process with rate density
n mu(p) sigma(|rel|) |p/m - P/M| by null collisions.  A candidate event
occurs at rate Lambda(P) = n sigma_max (|P|/M + <|p|>/m); its gas partner is
drawn from mu(p) (|P|/M + |p|/m) and accepted with probability
sigma |p/m - P/M| / (sigma_max (|P|/M + |p|/m)) <= 1, which makes the
accepted events exact for any P without a momentum cutoff.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import GasSpec, TracerSpec, _check_pair, spawn_generators
from .errors import GridMismatchError, MajorantViolation
from .evolution import SectorState
from .grid import MomentumGrid
from .kernels import KernelTable
from .scattering import ConstantLength, ScatteringModel

MIN_PARTICLES = 10_000


# ---------------------------------------------------------------------------
# grid stepper
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _lbe_rhs(n, h3, offsets, T0, w, out):
    # every (target, transfer) pair is one flow, added to the target and taken from its source
    for p in range(out.size):
        out[p] = 0.0
    for ti in range(n):
        for tj in range(n):
            for tk in range(n):
                t = (ti * n + tj) * n + tk
                gain = 0.0
                for q in range(offsets.shape[0]):
                    si = ti - offsets[q, 0]
                    sj = tj - offsets[q, 1]
                    sk = tk - offsets[q, 2]
                    if si < 0 or si >= n or sj < 0 or sj >= n or sk < 0 or sk >= n:
                        continue
                    s = (si * n + sj) * n + sk
                    flow = T0[t, q] * w[s] * h3
                    gain += flow
                    out[s] -= flow
                out[t] += gain


def lbe_rhs(w: SectorState, table: KernelTable) -> np.ndarray:
    if not w.is_diagonal or not table.is_diagonal:
        raise GridMismatchError("the classical stepper needs the diagonal sector and table")
    table.check_compatible(w.grid, w.delta)
    out = np.empty(w.grid.size)
    _lbe_rhs(w.grid.n, w.grid.cell_volume, w.grid.transfer_offsets.astype(np.int64), table.values, w.rho, out)
    return out


def lbe_step(w: SectorState, table: KernelTable, dt: float, method: str = "rk4") -> SectorState:
    """One Euler or RK4 step of the classical equation on the grid.

    The zero-cell self-weight adds equally to gain and loss and is omitted.
    """
    def f(x):
        return lbe_rhs(SectorState(w.grid, w.delta, x), table)

    x = w.rho
    if method == "euler":
        new = x + dt * f(x)
    elif method == "rk4":
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        new = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    else:
        raise ValueError(f"unknown method {method!r}")
    return SectorState(w.grid, w.delta, new, w.time + dt)


# ---------------------------------------------------------------------------
# particles
# ---------------------------------------------------------------------------


@dataclass
class Ensemble:
    """Equal-weight tracer particles."""

    momenta: np.ndarray
    time: float = 0.0
    seed: int = 0
    min_particles: int = MIN_PARTICLES

    def __post_init__(self):
        self.momenta = np.array(self.momenta, dtype=float).reshape(-1, 3)
        if self.momenta.shape[0] < self.min_particles:
            raise ValueError(
                f"{self.momenta.shape[0]} particles is below the statistical minimum {self.min_particles}"
            )

    @property
    def size(self) -> int:
        return self.momenta.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)

    @classmethod
    def from_grid(cls, w: SectorState, count: int, seed: int, min_particles: int = MIN_PARTICLES) -> "Ensemble":
        """Particles placed on grid nodes with probabilities w(P) h^3."""
        prob = np.clip(w.rho, 0.0, None)
        prob = prob / prob.sum()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5EED])))
        idx = rng.choice(w.grid.size, size=count, p=prob)
        return cls(w.grid.points[idx].copy(), 0.0, seed, min_particles)


@dataclass(frozen=True)
class Collider:
    """Precomputed bounds for one (gas, tracer, model) triple."""

    gas: GasSpec
    tracer: TracerSpec
    model: ScatteringModel
    sigma_max: float
    dsig_k: np.ndarray  # wave numbers of the angular-bound table
    dsig_bound: np.ndarray  # max over angles of |f|^2 at dsig_k, with margin
    mean_speed: float  # <|p|>/m of the gas

    @classmethod
    def build(cls, gas: GasSpec, tracer: TracerSpec, model: ScatteringModel) -> "Collider":
        _check_pair(gas, tracer)
        ks = np.concatenate([[0.0], np.geomspace(1e-3, 100.0 * gas.p_T, 400)])
        if isinstance(model, ConstantLength):
            bound = np.full(ks.size, model.a**2)
        else:
            cs = np.linspace(-1.0, 1.0, 201)
            bound = np.max(model.dsigma_domega_k(np.maximum(ks, 1e-6)[:, None], cs[None, :]), axis=1) * 1.1
        return cls(gas, tracer, model, model.sigma_max(), ks, bound, gas.distribution.mean_speed() / gas.mass)

    def angular_bound(self, k: np.ndarray) -> np.ndarray:
        """Bound on |f(k, theta)|^2 over theta: the larger of the two bracketing table rows."""
        i = np.clip(np.searchsorted(self.dsig_k, k), 1, self.dsig_k.size - 1)
        out = np.maximum(self.dsig_bound[i - 1], self.dsig_bound[i])
        # beyond the table the bound is the last row scaled by the forward peak growth ~ k^2
        far = k > self.dsig_k[-1]
        out[far] = self.dsig_bound[-1] * (k[far] / self.dsig_k[-1]) ** 2
        return out

    def inv_M(self) -> float:
        return 0.0 if math.isinf(self.tracer.mass) else 1.0 / self.tracer.mass

    def majorant(self, P: np.ndarray) -> np.ndarray:
        """Lambda(P) = n sigma_max (|P|/M + <|p|>/m)."""
        speed = np.linalg.norm(P, axis=-1) * self.inv_M()
        return self.gas.number_density * self.sigma_max * (speed + self.mean_speed)


def _sample_partners(col: Collider, P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gas momenta from mu(p) (|P|/M + |p|/m), one per row of ``P``."""
    n = P.shape[0]
    a = np.linalg.norm(P, axis=1) * col.inv_M()
    pick_plain = rng.random(n) * (a + col.mean_speed) < a
    out = np.empty((n, 3))
    k = int(pick_plain.sum())
    if k:
        out[pick_plain] = col.gas.distribution.sample(rng, k)
    if n - k:
        out[~pick_plain] = col.gas.distribution.sample(rng, n - k, speed_weighted=True)
    return out


def _sample_cos(col: Collider, k: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """cos(theta) from |f(k, theta)|^2 by rejection (uniform for a constant amplitude)."""
    n = k.size
    if isinstance(col.model, ConstantLength):
        return rng.uniform(-1.0, 1.0, n)
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        c = rng.uniform(-1.0, 1.0, todo.size)
        d = col.model.dsigma_domega_k(k[todo], c)
        bound = col.angular_bound(k[todo])
        if np.any(d > bound):
            raise MajorantViolation(f"dsigma/dOmega {np.max(d / bound)} times its bound")
        ok = rng.random(todo.size) * bound < d
        out[todo[ok]] = c[ok]
        todo = todo[~ok]
    return out


def _rotate(u: np.ndarray, cos_t: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Unit vectors at polar angle theta and azimuth phi about the unit vectors ``u``."""
    axis = np.zeros_like(u)
    axis[np.arange(u.shape[0]), np.argmin(np.abs(u), axis=1)] = 1.0
    e1 = axis - np.sum(axis * u, axis=1, keepdims=True) * u
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    return (cos_t[:, None] * u + (sin_t * np.cos(phi))[:, None] * e1 + (sin_t * np.sin(phi))[:, None] * e2)


def _kinematics(col: Collider, P, p, cos_t, phi):
    """Post-collision (P', p') from the pair and the scattering angles."""
    r = col.tracer.mass_ratio
    rel_in = p / (1.0 + r) - (r / (1.0 + r)) * P
    k = np.linalg.norm(rel_in, axis=1)
    u = rel_in / np.where(k > 0, k, 1.0)[:, None]
    u[k == 0] = (1.0, 0.0, 0.0)
    rel_out = k[:, None] * _rotate(u, cos_t, phi)
    total = P + p
    P_new = total / (1.0 + r) - rel_out
    return P_new, total - P_new


def _try_events(col: Collider, P: np.ndarray, rng: np.random.Generator):
    """One candidate event per row; returns (accepted mask, P', p, p')."""
    p = _sample_partners(col, P, rng)
    ms = col.tracer.reduced_mass
    inv_M = col.inv_M()
    m = col.gas.mass
    v_rel = p / m - P * inv_M
    speed = np.linalg.norm(v_rel, axis=1)
    k = ms * speed
    sigma = np.asarray(col.model.total_cross_section_k(k), dtype=float)
    if np.any(sigma > col.sigma_max * (1.0 + 1e-12)):
        raise MajorantViolation(f"sigma {sigma.max()} exceeds the majorant {col.sigma_max}")
    bound = col.sigma_max * (np.linalg.norm(P, axis=1) * inv_M + np.linalg.norm(p, axis=1) / m)
    ratio = np.where(bound > 0, sigma * speed / np.where(bound > 0, bound, 1.0), 0.0)
    if np.any(ratio > 1.0 + 1e-12):
        raise MajorantViolation(f"acceptance ratio {ratio.max()} exceeds one")
    accept = rng.random(P.shape[0]) < ratio
    P_new = P.copy()
    p_out = p.copy()
    idx = np.flatnonzero(accept)
    if idx.size:
        c = _sample_cos(col, k[idx], rng)
        phi = rng.uniform(0.0, 2.0 * math.pi, idx.size)
        P_new[idx], p_out[idx] = _kinematics(col, P[idx], p[idx], c, phi)
    return accept, P_new, p, p_out


def dsmc_collide(
    P,
    gas: GasSpec,
    tracer: TracerSpec,
    model: ScatteringModel,
    rng: np.random.Generator,
    force_gas=None,
    force_cos: float | None = None,
    max_candidates: int = 1_000_000,
):
    """Sample one real collision of a tracer at ``P``: returns (P', p_gas_in, p_gas_out).

    ``force_gas`` and ``force_cos`` are test hooks fixing the gas partner and
    the scattering angle.
    """
    col = Collider.build(gas, tracer, model)
    P = np.asarray(P, dtype=float).reshape(1, 3)
    if force_gas is not None or force_cos is not None:
        p = (np.asarray(force_gas, dtype=float).reshape(1, 3) if force_gas is not None
             else _sample_partners(col, P, rng))
        r = tracer.mass_ratio
        k = np.linalg.norm(p / (1.0 + r) - (r / (1.0 + r)) * P, axis=1)
        c = np.array([force_cos]) if force_cos is not None else _sample_cos(col, k, rng)
        phi = rng.uniform(0.0, 2.0 * math.pi, 1)
        P_new, p_out = _kinematics(col, P, p, c, phi)
        return P_new[0], p[0], p_out[0]
    for _ in range(max_candidates):
        acc, P_new, p, p_out = _try_events(col, P, rng)
        if acc[0]:
            return P_new[0], p[0], p_out[0]
    raise MajorantViolation("no collision accepted; majorant is far too loose")


def sample_cos_theta(gas: GasSpec, tracer: TracerSpec, model: ScatteringModel, k, rng: np.random.Generator):
    """Scattering-angle cosines drawn from |f(k, theta)|^2, one per entry of ``k``."""
    return _sample_cos(Collider.build(gas, tracer, model), np.asarray(k, dtype=float).ravel(), rng)


def collision_rate_estimate(P, gas, tracer, model, rng, candidates: int = 200_000) -> tuple[float, float]:
    """(rate, standard error) of real collisions at fixed ``P`` from thinned candidates."""
    col = Collider.build(gas, tracer, model)
    Ps = np.broadcast_to(np.asarray(P, dtype=float), (candidates, 3)).copy()
    acc, *_ = _try_events(col, Ps, rng)
    lam = float(col.majorant(Ps[:1])[0])
    frac = acc.mean()
    return lam * frac, lam * math.sqrt(frac * (1.0 - frac) / candidates)


@dataclass
class DSMCResult:
    times: np.ndarray
    snapshots: list = field(default_factory=list)  # momenta arrays
    collisions: int = 0
    candidates: int = 0

    def moments(self, tracer: TracerSpec) -> dict:
        """Per-snapshot energy and |P| means with standard errors."""
        out = {"time": self.times.tolist(), "energy": [], "energy_err": [], "modulus": [], "modulus_err": []}
        for P in self.snapshots:
            n = P.shape[0]
            e = np.sum(P**2, axis=1) / (2.0 * tracer.mass)
            a = np.linalg.norm(P, axis=1)
            out["energy"].append(float(e.mean()))
            out["energy_err"].append(float(e.std(ddof=1) / math.sqrt(n)))
            out["modulus"].append(float(a.mean()))
            out["modulus_err"].append(float(a.std(ddof=1) / math.sqrt(n)))
        return out


def _run_chunk(col: Collider, P0: np.ndarray, times: np.ndarray, rng: np.random.Generator):
    P = P0.copy()
    n = P.shape[0]
    t = np.zeros(n)
    t_next = rng.exponential(1.0, n) / col.majorant(P)
    shots = []
    n_coll = 0
    n_cand = 0
    for ts in times:
        while True:
            active = np.flatnonzero(t_next < ts)
            if active.size == 0:
                break
            n_cand += active.size
            acc, P_new, _, _ = _try_events(col, P[active], rng)
            P[active] = P_new
            n_coll += int(acc.sum())
            t[active] = t_next[active]
            # memoryless: waiting times are redrawn with the post-event majorant
            t_next[active] = t[active] + rng.exponential(1.0, active.size) / col.majorant(P[active])
        shots.append(P.copy())
    return shots, n_coll, n_cand


def dsmc_run(
    ensemble: Ensemble,
    times,
    gas: GasSpec,
    tracer: TracerSpec,
    model: ScatteringModel,
    seed: int | None = None,
    workers: int = 1,
) -> DSMCResult:
    """Evolve the ensemble and record its momenta at each of ``times``.

    Particles are split into ``workers`` contiguous chunks; chunk i draws from
    ``SeedSequence(seed).spawn(workers)[i]``.  Output depends only on
    (ensemble, times, physics, seed, workers).
    """
    times = np.asarray(sorted(float(x) for x in times))
    if times.size == 0 or times[0] < 0:
        raise ValueError("snapshot times must be non-negative")
    col = Collider.build(gas, tracer, model)
    if not math.isfinite(float(np.max(col.majorant(ensemble.momenta)))):
        raise MajorantViolation("infinite majorant rate")
    seed = ensemble.seed if seed is None else seed
    rngs = spawn_generators(seed, workers)
    chunks = np.array_split(np.arange(ensemble.size), workers)
    jobs = [(col, ensemble.momenta[c], times, rngs[i]) for i, c in enumerate(chunks)]
    if workers == 1:
        parts = [_run_chunk(*jobs[0])]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda a: _run_chunk(*a), jobs))
    shots = [np.concatenate([p[0][k] for p in parts]) for k in range(times.size)]
    return DSMCResult(times, shots, sum(p[1] for p in parts), sum(p[2] for p in parts))


def shell_fluxes(
    ensemble: Ensemble,
    t_final: float,
    edges,
    gas: GasSpec,
    tracer: TracerSpec,
    model: ScatteringModel,
    seed: int | None = None,
) -> dict:
    """Count collisions carrying |P| outward and inward across each shell radius.

    Returns per-edge ``up`` and ``down`` counts, the net flux (up - down) per
    particle per unit time and its Poisson standard error.  At stationarity
    the net flux vanishes (detailed balance).
    """
    edges = np.asarray(edges, dtype=float)
    col = Collider.build(gas, tracer, model)
    rng = spawn_generators(ensemble.seed if seed is None else seed, 1)[0]
    P = ensemble.momenta.copy()
    n = P.shape[0]
    t = np.zeros(n)
    t_next = rng.exponential(1.0, n) / col.majorant(P)
    up = np.zeros(edges.size, dtype=np.int64)
    down = np.zeros(edges.size, dtype=np.int64)
    while True:
        active = np.flatnonzero(t_next < t_final)
        if active.size == 0:
            break
        a0 = np.linalg.norm(P[active], axis=1)
        _, P_new, _, _ = _try_events(col, P[active], rng)
        a1 = np.linalg.norm(P_new, axis=1)
        P[active] = P_new
        up += np.sum((a0[:, None] < edges) & (a1[:, None] >= edges), axis=0)
        down += np.sum((a0[:, None] >= edges) & (a1[:, None] < edges), axis=0)
        t[active] = t_next[active]
        t_next[active] = t[active] + rng.exponential(1.0, active.size) / col.majorant(P[active])
    scale = 1.0 / (n * t_final)
    return {
        "edges": edges,
        "up": up,
        "down": down,
        "net": (up - down) * scale,
        "error": np.sqrt(up + down) * scale,
    }


def radial_histogram(P: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Counts of |P| in shells ``edges``."""
    return np.histogram(np.linalg.norm(P, axis=1), bins=edges)[0]


def grid_radial_probabilities(w: SectorState, edges: np.ndarray) -> np.ndarray:
    """Probability per |P| shell of a diagonal grid state (node masses w h^3)."""
    a = np.linalg.norm(w.grid.points, axis=1)
    return np.histogram(a, bins=edges, weights=w.rho * w.grid.cell_volume)[0]


def snap_to_grid(P: np.ndarray, grid: MomentumGrid) -> np.ndarray:
    """Nearest grid node of each momentum (clipped to the grid), as exact node coordinates."""
    half = (grid.n - 1) // 2
    idx = np.clip(np.rint(np.asarray(P) / grid.spacing).astype(np.int64) + half, 0, grid.n - 1)
    return grid.points[grid.flat_index(idx)]


def grid_shell_density(w: SectorState, edges, sub: int = 12) -> np.ndarray:
    """Shell probabilities of the continuous density behind a diagonal grid state.

    Node values are point samples, not cell masses, so ``w h^3`` differs from
    the mass of a cell by O(h^2) (about 15% in the tails at h = p_T / 2).
    Here ln w is interpolated over each node-centred cell with 3-point
    Lagrange weights per axis, which reproduces any Gaussian exactly, and
    integrated over ``sub^3`` midpoints per cell.  Boundary nodes (no outer
    neighbour) are skipped; the result is normalized over interior cells.
    """
    grid = w.grid
    n = grid.n
    edges = np.asarray(edges, dtype=float)
    lw = np.log(np.clip(w.rho, 1e-300, None)).reshape(n, n, n)
    inner = grid.axis[1:-1]
    u = (np.arange(sub) + 0.5) / sub - 0.5
    # weights of nodes (-1, 0, +1) at fractional offset u
    lag = np.stack([0.5 * u * (u - 1.0), 1.0 - u * u, 0.5 * u * (u + 1.0)], axis=1)
    m = n - 2
    out = np.zeros(edges.size - 1)
    total = 0.0
    for a, la in zip(u, lag):
        # contract one axis at a time: (m, n, n) -> (m, m, n) -> (m, m, m)
        va = sum(la[s] * lw[s:s + m] for s in range(3))
        for b, lb in zip(u, lag):
            vb = sum(lb[s] * va[:, s:s + m] for s in range(3))
            x2 = (inner + a * grid.spacing) ** 2
            y2 = (inner + b * grid.spacing) ** 2
            for c, lc in zip(u, lag):
                v = sum(lc[s] * vb[:, :, s:s + m] for s in range(3))
                dens = np.exp(v)
                z2 = (inner + c * grid.spacing) ** 2
                r = np.sqrt(x2[:, None, None] + y2[None, :, None] + z2[None, None, :])
                out += np.histogram(r.ravel(), bins=edges, weights=dens.ravel())[0]
                total += dens.sum()
    return out / total


def shell_z_scores(P: np.ndarray, w: SectorState, edges: np.ndarray, systematic: float = 0.02) -> np.ndarray:
    """z per shell: (p_hat - p) / sqrt(p (1 - p) / N + (systematic p)^2).

    ``p_hat`` bins the particles' own |P|; ``p`` comes from
    :func:`grid_shell_density`, so both sides describe continuous densities.
    """
    n = P.shape[0]
    p_hat = radial_histogram(P, edges) / n
    p = grid_shell_density(w, edges)
    var = np.clip(p * (1.0 - p), 1e-300, None) / n + (systematic * p) ** 2
    return (p_hat - p) / np.sqrt(var)


def maxwell_shell_probabilities(grid: MomentumGrid, gas: GasSpec, tracer: TracerSpec, edges) -> np.ndarray:
    from .evolution import thermal_state

    return grid_radial_probabilities(thermal_state(grid, gas, tracer), np.asarray(edges))


def sample_gaussian_ensemble(center, sd: float, count: int, seed: int) -> Ensemble:
    """Momenta from an isotropic normal distribution (per-component standard deviation ``sd``)."""
    rng = spawn_generators(seed, 1)[0]
    return Ensemble(np.asarray(center, dtype=float) + rng.normal(0.0, sd, (count, 3)), 0.0, seed)


def sample_thermal_ensemble(gas: GasSpec, tracer: TracerSpec, count: int, seed: int) -> Ensemble:
    """Tracer momenta from the continuous Maxwell distribution at mass M."""
    return sample_gaussian_ensemble(np.zeros(3), tracer.thermal_momentum(gas) / math.sqrt(2.0), count, seed)


__all__ = [
    "Ensemble",
    "Collider",
    "lbe_rhs",
    "lbe_step",
    "dsmc_collide",
    "sample_cos_theta",
    "dsmc_run",
    "collision_rate_estimate",
    "radial_histogram",
    "shell_z_scores",
    "snap_to_grid",
    "grid_shell_density",
    "shell_fluxes",
    "sample_thermal_ensemble",
    "sample_gaussian_ensemble",
]
