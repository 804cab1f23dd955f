from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlbe.core import (
    GasSpec,
    MaxwellDensity,
    TabulatedDensity,
    TracerSpec,
    as_momentum,
    decompose,
    density_normalization,
    mean_collision_rate,
    mu,
    rel,
    sample_mu,
    spawn_generators,
)
from qlbe.errors import DegenerateDirectionError, NonFiniteMomentumError
from qlbe.scattering import ConstantLength, HardSphere

from conftest import random_rotation

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vec = st.tuples(finite, finite, finite).map(np.array)


def test_gas_spec_p_T_consistency():
    g = GasSpec(mass=2.0, temperature=0.7)
    assert abs(g.p_T**2 - 2 * 2.0 * 0.7) <= 1e-12 * g.p_T**2
    assert GasSpec.from_p_T(1.0).temperature == 0.5


@pytest.mark.parametrize("kw", [{"mass": 0.0}, {"temperature": -1.0}, {"number_density": -1.0}, {"mass": math.nan}])
def test_gas_spec_rejects_invalid(kw):
    with pytest.raises(ValueError):
        GasSpec(**kw)


def test_gas_spec_rejects_inconsistent_maxwell():
    with pytest.raises(ValueError):
        GasSpec(distribution=MaxwellDensity(2.0))


@pytest.mark.parametrize("M", [0.1, 1.0, 3.0, 1e6])
def test_reduced_mass(M):
    t = TracerSpec(M)
    assert abs(t.reduced_mass - M / (M + 1.0)) <= 1e-12 * t.reduced_mass
    assert 0 < t.reduced_mass <= min(1.0, M)


def test_infinite_tracer_is_exact():
    t = TracerSpec(math.inf)
    assert t.mass_ratio == 0.0
    assert t.reduced_mass == 1.0


def test_tracer_rejects_nonpositive_mass():
    with pytest.raises(ValueError):
        TracerSpec(0.0)


def test_rel_examples():
    g = GasSpec()
    assert np.allclose(rel([2, 0, 0], [0, 0, 0], g, TracerSpec(1.0)), [1, 0, 0], atol=1e-15)
    assert np.allclose(rel([1, 2, 3], [5, -7, 2], g, TracerSpec(1e12)), [1, 2, 3], atol=1e-10)
    assert np.allclose(rel([4, 0, 0], [8, 0, 0], g, TracerSpec(3.0)), [1, 0, 0], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(vec, vec, st.floats(0.01, 100.0))
def test_rel_definition(p, P, M):
    g = GasSpec()
    t = TracerSpec(M)
    ms = M / (M + 1.0)
    expect = ms * p - (ms / M) * P
    assert np.allclose(rel(p, P, g, t), expect, rtol=1e-12, atol=1e-12 * (1 + np.abs(p).max() + np.abs(P).max()))


def test_decompose_examples():
    par, perp = decompose([3, 4, 0], [1, 0, 0])
    assert np.array_equal(par, [3, 0, 0]) and np.array_equal(perp, [0, 4, 0])
    par, perp = decompose([0, 0, 5], [0, 0, 5])
    assert np.allclose(par, [0, 0, 5]) and np.allclose(perp, 0)
    par, perp = decompose([1, 1, 0], [1, -1, 0])
    assert np.allclose(par, 0) and np.allclose(perp, [1, 1, 0])


def test_decompose_zero_q():
    with pytest.raises(DegenerateDirectionError):
        decompose([1, 2, 3], [0, 0, 0])


@settings(max_examples=80, deadline=None)
@given(vec, vec.filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_decompose_properties(P, Q):
    par, perp = decompose(P, Q)
    scale = np.linalg.norm(P) * np.linalg.norm(Q) + 1e-300
    assert np.allclose(par + perp, P, rtol=1e-12, atol=1e-12 * (np.linalg.norm(P) + 1))
    assert abs(np.dot(perp, Q)) <= 1e-12 * scale + 1e-300
    assert abs(np.dot(par, Q) - np.dot(P, Q)) <= 1e-12 * scale + 1e-300


@pytest.mark.parametrize("bad", [[np.nan, 0, 0], [0, np.inf, 0]])
def test_nonfinite_momentum_rejected(bad):
    with pytest.raises(NonFiniteMomentumError):
        as_momentum(bad)


def test_mu_values():
    g = GasSpec()
    pt = g.p_T
    assert mu([0, 0, 0], g) == pytest.approx(math.pi**-1.5 / pt**3, rel=1e-15)
    assert mu([pt, 0, 0], g) == pytest.approx(math.exp(-1) * math.pi**-1.5 / pt**3, rel=1e-15)


def test_mu_isotropic_and_positive():
    g = GasSpec()
    rng = np.random.default_rng(1)
    p = rng.normal(size=(50, 3))
    R = random_rotation(rng)
    assert np.allclose(mu(p, g), mu(p @ R.T, g), rtol=1e-13)
    assert np.all(mu(p * 3, g) > 0)


@pytest.mark.parametrize("T", [0.5, 2.0])
def test_mu_normalization(T):
    assert abs(density_normalization(GasSpec(temperature=T)) - 1.0) <= 1e-6


def test_tabulated_density_normalization_checked():
    r = np.linspace(0, 6, 6001)
    g = np.exp(-r**2) / math.pi**1.5
    TabulatedDensity(r, g)
    with pytest.raises(ValueError):
        TabulatedDensity(r, 2 * g)


def test_sample_mu_moments():
    g = GasSpec()
    rng = spawn_generators(7, 1)[0]
    s = sample_mu(g, rng, 1_000_000)
    sd = g.p_T / math.sqrt(2)
    assert np.all(np.abs(s.mean(axis=0)) < 5 * sd / 1000)
    assert np.all(np.abs(s.var(axis=0) / (g.p_T**2 / 2) - 1) < 0.01)


def test_sample_mu_deterministic():
    g = GasSpec()
    a = sample_mu(g, spawn_generators(3, 1)[0], 1000)
    b = sample_mu(g, spawn_generators(3, 1)[0], 1000)
    assert np.array_equal(a, b)


def test_spawn_generators_rule():
    rngs = spawn_generators(11, 3)
    child = np.random.SeedSequence(11).spawn(3)[2]
    ref = np.random.Generator(np.random.PCG64(child))
    assert np.array_equal(rngs[2].random(5), ref.random(5))


@pytest.mark.parametrize("M", [1.0, 3.0, math.inf])
def test_mean_collision_rate_closed_form(M):
    g = GasSpec(number_density=2.0)
    a = 0.7
    closed = 2.0 * 4 * math.pi * a**2 * 2 * g.p_T / (math.sqrt(math.pi) * g.mass)
    assert mean_collision_rate([0, 0, 0], g, TracerSpec(M), ConstantLength(a)) == pytest.approx(closed, rel=1e-10)


def test_mean_collision_rate_zero_cross_section():
    assert mean_collision_rate([1, 0, 0], GasSpec(), TracerSpec(1.0), ConstantLength(0.0)) == 0.0


@pytest.mark.parametrize("model", [ConstantLength(1.0), HardSphere(0.8)])
def test_mean_collision_rate_even(model):
    g, t = GasSpec(), TracerSpec(2.0)
    P = np.array([0.3, -1.2, 0.8])
    assert mean_collision_rate(P, g, t, model) == pytest.approx(mean_collision_rate(-P, g, t, model), rel=1e-12)


def test_mean_collision_rate_moving_tracer_oracle():
    # constant sigma: n sigma <|p/m - P/M|>; for a Maxwell gas this is the mean
    # of a shifted Maxwell speed, sd^2 = p_T^2/2, shift u = (m/M)|P|
    g, t = GasSpec(), TracerSpec(2.0)
    P = np.array([0.0, 0.0, 1.5])
    u = 0.75
    s = g.p_T / math.sqrt(2)
    mean = s * math.sqrt(2 / math.pi) * math.exp(-u * u / (2 * s * s)) + (u + s * s / u) * math.erf(u / (s * math.sqrt(2)))
    assert mean_collision_rate(P, g, t, ConstantLength(1.0)) == pytest.approx(4 * math.pi * mean, rel=1e-9)
