"""Kinematic primitives, gas momentum distributions and the internal unit system.

Units: hbar = k_B = 1.  The default gas particle mass is 1 and the default
temperature is chosen so that the most probable gas momentum p_T = sqrt(2 m T)
equals 1.  Every quantity handled by the library is in these internal units;
conversion from SI happens once, at the configuration boundary (see
:mod:`qlbe.config`).

Momenta are plain ``numpy`` arrays whose last axis has length 3.  All
functions broadcast over leading axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING

import numba
import numpy as np

from .errors import DegenerateDirectionError, NonFiniteMomentumError, QuadratureError

if TYPE_CHECKING:
    from .scattering import ScatteringModel

DEFAULT_CUTOFF = 6.0  # thermal averages integrate |p| <= 6 p_T

MU_MAXWELL = 0
MU_TABULATED = 1


def as_momentum(p, name: str = "momentum") -> np.ndarray:
    """Return ``p`` as a float array with a trailing axis of length 3.

    Non-finite components are rejected; they would silently poison every
    kernel evaluation downstream.
    """
    arr = np.asarray(p, dtype=float)
    if arr.shape == () or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have a trailing axis of length 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteMomentumError(f"{name} has non-finite components")
    return arr


@lru_cache(maxsize=64)
def gauss_legendre(n: int, a: float = -1.0, b: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to ``[a, b]`` (cached, read-only)."""
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    nodes = half * x + 0.5 * (a + b)
    weights = half * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


# ---------------------------------------------------------------------------
# momentum distributions of the gas
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def mu_nb(kind, par, xs, ys, p2):
    """Isotropic density at squared momentum ``p2`` (numba-side evaluation)."""
    if kind == MU_MAXWELL:
        pt = par[0]
        return math.exp(-p2 / (pt * pt)) / (math.pi ** 1.5 * pt * pt * pt)
    r = math.sqrt(p2)
    if r >= xs[-1]:
        return 0.0
    return np.interp(r, xs, ys)


@numba.njit(cache=True)
def sqrt_mu_row_nb(kind, par, xs, ys, p2, out):
    """out[i] = sqrt(mu(p2[i])) with the density kind resolved once."""
    if kind == MU_MAXWELL:
        pt = par[0]
        norm = 1.0 / math.sqrt(math.pi ** 1.5 * pt * pt * pt)
        inv = 0.5 / (pt * pt)
        for i in range(p2.size):
            out[i] = norm * math.exp(-p2[i] * inv)
        return
    for i in range(p2.size):
        out[i] = math.sqrt(mu_nb(kind, par, xs, ys, p2[i]))


@dataclass(frozen=True)
class MaxwellDensity:
    """mu(p) = exp(-p^2/p_T^2) / (pi^(3/2) p_T^3)."""

    p_T: float

    def __post_init__(self):
        if not (self.p_T > 0 and math.isfinite(self.p_T)):
            raise ValueError("p_T must be positive and finite")

    @property
    def scale(self) -> float:
        return self.p_T

    def __call__(self, p) -> np.ndarray:
        p = as_momentum(p)
        p2 = np.einsum("...i,...i->...", p, p)
        return self.radial(p2)

    def radial(self, p2) -> np.ndarray:
        pt = self.p_T
        return np.exp(-np.asarray(p2) / pt**2) / (math.pi**1.5 * pt**3)

    def mean_speed(self) -> float:
        """<|p|> = 2 p_T / sqrt(pi)."""
        return 2.0 * self.p_T / math.sqrt(math.pi)

    def sample(self, rng: np.random.Generator, size: int, speed_weighted: bool = False) -> np.ndarray:
        if not speed_weighted:
            return rng.normal(0.0, self.p_T / math.sqrt(2.0), size=(size, 3))
        # density ~ |p| mu(p): |p|^2 / p_T^2 ~ Gamma(2, 1)
        radius = self.p_T * np.sqrt(rng.gamma(2.0, 1.0, size=size))
        return radius[:, None] * random_unit_vectors(rng, size)

    def numba_args(self):
        return MU_MAXWELL, np.array([self.p_T]), np.zeros(1), np.zeros(1)


@dataclass(frozen=True)
class TabulatedDensity:
    """Isotropic density given as samples of g(|p|) on increasing radii.

    Linear interpolation in between, zero beyond the last radius.  The table
    must be normalized: 4 pi \\int p^2 g(p) dp = 1 (checked to 1e-6).
    """

    radii: tuple
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(x) for x in self.radii))
        object.__setattr__(self, "values", tuple(float(x) for x in self.values))
        r = np.asarray(self.radii, dtype=float)
        g = np.asarray(self.values, dtype=float)
        if r.ndim != 1 or r.shape != g.shape or r.size < 3:
            raise ValueError("radii and values must be 1-D of equal length >= 3")
        if r[0] != 0.0 or np.any(np.diff(r) <= 0):
            raise ValueError("radii must start at 0 and increase strictly")
        if np.any(g < 0):
            raise ValueError("density values must be non-negative")
        norm = self._radial_integral(r, g, power=2)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"density not normalized: 4 pi int p^2 g = {norm}")

    @staticmethod
    def _radial_integral(r, g, power):
        # piecewise-linear g integrated exactly against p^power on each segment
        total = 0.0
        for a, b, ga, gb in zip(r[:-1], r[1:], g[:-1], g[1:]):
            nodes, weights = gauss_legendre(4, a, b)
            gi = ga + (gb - ga) * (nodes - a) / (b - a)
            total += np.sum(weights * gi * nodes**power)
        return 4.0 * math.pi * total

    @property
    def scale(self) -> float:
        r = np.asarray(self.radii)
        g = np.asarray(self.values)
        return math.sqrt(self._radial_integral(r, g, power=4) * 2.0 / 3.0)

    def __call__(self, p) -> np.ndarray:
        p = as_momentum(p)
        return self.radial(np.einsum("...i,...i->...", p, p))

    def radial(self, p2) -> np.ndarray:
        r = np.sqrt(np.asarray(p2, dtype=float))
        return np.interp(r, self.radii, self.values, right=0.0)

    def mean_speed(self) -> float:
        return self._radial_integral(np.asarray(self.radii), np.asarray(self.values), power=3)

    def _inverse_cdf_table(self, power: int):
        r = np.asarray(self.radii)
        fine = np.linspace(0.0, r[-1], 8 * r.size + 1)
        pdf = np.interp(fine, r, self.values) * fine**power
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(fine))])
        return fine, cdf / cdf[-1]

    def sample(self, rng: np.random.Generator, size: int, speed_weighted: bool = False) -> np.ndarray:
        fine, cdf = self._inverse_cdf_table(3 if speed_weighted else 2)
        radius = np.interp(rng.random(size), cdf, fine)
        return radius[:, None] * random_unit_vectors(rng, size)

    def numba_args(self):
        return (
            MU_TABULATED,
            np.zeros(1),
            np.asarray(self.radii, dtype=float),
            np.asarray(self.values, dtype=float),
        )


def random_unit_vectors(rng: np.random.Generator, size: int) -> np.ndarray:
    v = rng.normal(size=(size, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# physical specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GasSpec:
    """Ideal, stationary, uniform gas.

    ``temperature`` is an energy (k_B = 1).  ``distribution`` defaults to the
    Maxwell density at this temperature; any normalized isotropic density may
    be supplied instead.
    """

    mass: float = 1.0
    number_density: float = 1.0
    temperature: float = 0.5
    distribution: MaxwellDensity | TabulatedDensity | None = None

    def __post_init__(self):
        for name in ("mass", "temperature"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"GasSpec.{name} must be positive and finite, got {value!r}")
        # zero density is admitted: it switches the collision generator off
        if not (self.number_density >= 0 and math.isfinite(self.number_density)):
            raise ValueError(f"GasSpec.number_density must be >= 0, got {self.number_density!r}")
        if self.distribution is None:
            object.__setattr__(self, "distribution", MaxwellDensity(self.p_T))
        elif isinstance(self.distribution, MaxwellDensity):
            if abs(self.distribution.p_T / self.p_T - 1.0) > 1e-12:
                raise ValueError("Maxwell distribution p_T inconsistent with mass and temperature")

    @classmethod
    def from_p_T(cls, p_T: float = 1.0, mass: float = 1.0, number_density: float = 1.0) -> "GasSpec":
        return cls(mass=mass, number_density=number_density, temperature=p_T**2 / (2.0 * mass))

    @property
    def p_T(self) -> float:
        """Most probable momentum, p_T^2 = 2 m T."""
        return math.sqrt(2.0 * self.mass * self.temperature)

    def with_density(self, number_density: float) -> "GasSpec":
        return GasSpec(self.mass, number_density, self.temperature, self.distribution)


@dataclass(frozen=True)
class TracerSpec:
    """Brownian tracer of mass M in a gas of particle mass ``gas_mass``.

    ``mass = math.inf`` selects the infinitely heavy tracer (m/M = 0) and is
    handled exactly, not as a large number.
    """

    mass: float
    gas_mass: float = 1.0

    def __post_init__(self):
        if not (self.mass > 0):
            raise ValueError("tracer mass must be positive")
        if not (self.gas_mass > 0 and math.isfinite(self.gas_mass)):
            raise ValueError("gas mass must be positive and finite")

    @classmethod
    def for_gas(cls, mass: float, gas: GasSpec) -> "TracerSpec":
        return cls(mass=mass, gas_mass=gas.mass)

    @property
    def mass_ratio(self) -> float:
        """m / M (exactly 0 for an infinitely heavy tracer)."""
        return 0.0 if math.isinf(self.mass) else self.gas_mass / self.mass

    @property
    def reduced_mass(self) -> float:
        return self.gas_mass / (1.0 + self.mass_ratio)

    def thermal_momentum(self, gas: GasSpec) -> float:
        """sqrt(2 M T) of the tracer at the gas temperature."""
        return math.sqrt(2.0 * self.mass * gas.temperature)


def _check_pair(gas: GasSpec, tracer: TracerSpec) -> None:
    if gas.mass != tracer.gas_mass:
        raise ValueError(f"tracer built for gas mass {tracer.gas_mass}, gas has {gas.mass}")


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def rel(p, P, gas: GasSpec, tracer: TracerSpec) -> np.ndarray:
    """Relative momentum (m*/m) p - (m*/M) P."""
    _check_pair(gas, tracer)
    p = as_momentum(p, "p")
    P = as_momentum(P, "P")
    r = tracer.mass_ratio
    return p / (1.0 + r) - (r / (1.0 + r)) * P


def decompose(P, Q) -> tuple[np.ndarray, np.ndarray]:
    """Split ``P`` into components parallel and perpendicular to ``Q``."""
    P = as_momentum(P, "P")
    Q = as_momentum(Q, "Q")
    q2 = np.einsum("...i,...i->...", Q, Q)
    if np.any(q2 == 0.0):
        raise DegenerateDirectionError("decomposition along a zero vector")
    coef = np.einsum("...i,...i->...", P, Q) / q2
    parallel = coef[..., None] * Q
    return parallel, P - parallel


def mu(p, gas: GasSpec) -> np.ndarray:
    """Momentum density of the gas at ``p`` (inverse momentum cubed)."""
    return gas.distribution(p)


def sample_mu(gas: GasSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw ``size`` i.i.d. gas momenta from the gas distribution."""
    return gas.distribution.sample(rng, size)


def spawn_generators(seed: int, n_workers: int) -> list[np.random.Generator]:
    """Per-worker generators: worker ``i`` gets ``SeedSequence(seed).spawn(n)[i]``."""
    children = np.random.SeedSequence(seed).spawn(n_workers)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def density_normalization(gas: GasSpec, cutoff: float = DEFAULT_CUTOFF, order: int = 48) -> float:
    """Tensor Gauss-Legendre integral of mu over the cube |p_i| <= cutoff * scale."""
    L = cutoff * gas.distribution.scale
    x, w = gauss_legendre(order, -L, L)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    W = w[:, None, None] * w[None, :, None] * w[None, None, :]
    return float(np.sum(W * gas.distribution.radial(X**2 + Y**2 + Z**2)))


def _rate_integral(P, gas, tracer, model, cutoff, n_r, n_u):
    r = tracer.mass_ratio
    p0 = r * P
    a = float(np.linalg.norm(p0))
    s_max = cutoff * gas.distribution.scale + a
    s, ws = gauss_legendre(n_r, 0.0, s_max)
    u, wu = gauss_legendre(n_u)
    S, U = np.meshgrid(s, u, indexing="ij")
    density = gas.distribution.radial(a * a + S * S + 2.0 * a * S * U)
    k = s / (1.0 + r)  # |rel| = (m*/m) s
    sigma = np.asarray(model.total_cross_section_k(k), dtype=float)
    speed = s / gas.mass
    integrand = density * (sigma * speed * s * s)[:, None]
    return 2.0 * math.pi * gas.number_density * float(ws @ integrand @ wu)


def mean_collision_rate(
    P,
    gas: GasSpec,
    tracer: TracerSpec,
    model: "ScatteringModel",
    cutoff: float = DEFAULT_CUTOFF,
    order: int = 48,
    rtol: float = 1e-8,
) -> float:
    """Average total collision rate n <sigma(rel) |rel|/m*> of a tracer at ``P``.

    Spherical coordinates are centred on the gas momentum (m/M) P at which
    the relative velocity vanishes, which keeps the integrand smooth.  The
    error bound combines order doubling and a cutoff extension; exceeding
    ``rtol`` raises :class:`QuadratureError`.
    """
    _check_pair(gas, tracer)
    P = as_momentum(P, "P")
    coarse = _rate_integral(P, gas, tracer, model, cutoff, order, order)
    fine = _rate_integral(P, gas, tracer, model, cutoff, 2 * order, 2 * order)
    wider = _rate_integral(P, gas, tracer, model, cutoff + 1.0, 2 * order, 2 * order)
    bound = abs(fine - coarse) + abs(wider - fine)
    if bound > rtol * abs(fine) and fine != 0.0:
        raise QuadratureError("mean collision rate quadrature did not converge", fine, bound)
    return fine
