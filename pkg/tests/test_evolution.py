from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from qlbe.classical import lbe_step
from qlbe.core import GasSpec, TracerSpec
from qlbe.errors import GridMismatchError, MonitorViolation, StabilityError
from qlbe.evolution import (
    MonitorTolerances,
    SectorState,
    apply_generator,
    collision_step,
    dt_max,
    entropy_monitor,
    evolve,
    fit_decay_rate,
    free_phase,
    gaussian_state,
    phase_angles,
    pure_state_sectors,
    step,
    thermal_state,
    two_point_positivity,
)
from qlbe.grid import MomentumGrid
from qlbe.kernels import QuadratureSpec, tabulate


def two_packets(grid, kick=1.0, width=0.8):
    pts = grid.points
    shift = np.array([kick, 0.0, 0.0])
    return np.exp(-np.sum((pts - shift) ** 2, axis=1) / width**2) + np.exp(
        -np.sum((pts + shift) ** 2, axis=1) / width**2
    )


@pytest.fixture(scope="module")
def packet_sectors(small_grid):
    return pure_state_sectors(small_grid, two_packets(small_grid), [(1, 0, 0), (-1, 0, 0), (0, 1, 0)])


def test_thermal_state_is_stationary(std_grid, std_diag_table, gas, tracer):
    th = thermal_state(std_grid, gas, tracer)
    d = apply_generator(th, std_diag_table)
    rel = np.abs(d).sum() / (std_diag_table.m_out.max() * np.abs(th.rho).sum())
    assert rel <= 2e-2
    # the discrete generator keeps detailed balance to rounding
    assert rel < 1e-10


def test_zero_density_gives_zero_derivative(small_grid, tracer, model, packet_sectors):
    zero = {tuple(int(v) for v in t.delta): t for t in tabulate(
        small_grid, [np.array([1, 0, 0]) * small_grid.spacing], GasSpec(number_density=0.0), tracer, model)}
    for key in [(0, 0, 0), (1, 0, 0)]:
        assert not apply_generator(packet_sectors[key], zero[key]).any()


def _point_mass(grid):
    rho = np.zeros(grid.size)
    c = grid.size // 2
    rho[c] = 1.0 / grid.cell_volume
    return SectorState(grid, np.zeros(3), rho), c


def test_point_mass_derivative(small_grid, small_tables):
    t = small_tables[(0, 0, 0)]
    st, c = _point_mass(small_grid)
    d = apply_generator(st, t)
    assert d[c] == pytest.approx(-(t.m_out[c] - t.zero_cell[c]) * st.rho[c], rel=1e-12)


def test_point_mass_derivative_without_zero_cell(small_grid, gas, tracer, model):
    t = tabulate(small_grid, [], gas, tracer, model, QuadratureSpec(zero_cell=False))[0]
    assert not t.zero_cell.any()
    st, c = _point_mass(small_grid)
    assert apply_generator(st, t)[c] == pytest.approx(-t.m_out[c] * st.rho[c], rel=1e-12)


def test_free_phase_properties(packet_sectors, tracer):
    st = packet_sectors[(1, 0, 0)]
    assert np.array_equal(free_phase(packet_sectors[(0, 0, 0)], 0.7, tracer).rho, packet_sectors[(0, 0, 0)].rho)
    one = free_phase(st, 0.4, tracer)
    assert np.allclose(np.abs(one.rho), np.abs(st.rho), rtol=0, atol=1e-15)
    two = free_phase(free_phase(st, 0.2, tracer), 0.2, tracer)
    assert np.allclose(one.rho, two.rho, rtol=1e-13, atol=1e-16)


def test_phase_angles_exact(small_grid, tracer):
    ang = phase_angles(small_grid, (1, 0, 0), tracer)
    P = small_grid.points
    ref = (np.sum(P**2, axis=1) - np.sum((P - [small_grid.spacing, 0, 0]) ** 2, axis=1)) / 2.0
    assert np.allclose(ang, ref, rtol=0, atol=1e-12)
    assert not phase_angles(small_grid, (1, 0, 0), TracerSpec(math.inf)).any()


def test_trace_conserved(small_grid, small_tables, tracer):
    st = gaussian_state(small_grid, 0.9, (0.8, 0.0, 0.0))
    t = small_tables[(0, 0, 0)]
    dt = 0.5 * dt_max(t)
    tr0 = st.trace()
    for _ in range(20):
        st = step(st, t, dt, tracer)
    assert abs(st.trace() - tr0) < 1e-12
    assert st.time == pytest.approx(20 * dt)


def test_step_refuses_large_dt(small_grid, small_tables, tracer):
    st = gaussian_state(small_grid, 0.9)
    t = small_tables[(0, 0, 0)]
    with pytest.raises(StabilityError):
        step(st, t, 1.01 * dt_max(t), tracer)


def test_step_rejects_wrong_table(packet_sectors, small_tables, tracer):
    with pytest.raises(GridMismatchError):
        step(packet_sectors[(1, 0, 0)], small_tables[(0, 1, 0)], 1e-3, tracer)


def test_coherence_l1_non_increasing(packet_sectors, small_tables, tracer):
    dt = dt_max(small_tables[(0, 0, 0)])
    for key in [(1, 0, 0), (0, 1, 0)]:
        st = packet_sectors[key]
        prev = st.l1()
        for _ in range(15):
            st = step(st, small_tables[key], dt, tracer)
            assert st.l1() <= prev + 1e-10
            prev = st.l1()


def test_sector_closure(packet_sectors, small_tables):
    st = packet_sectors[(1, 0, 0)]
    d = apply_generator(st, small_tables[(1, 0, 0)])
    assert not d[~st.mask].any()


def test_hermitian_pairing_preserved(small_grid, packet_sectors, small_tables, tracer):
    plus, minus = packet_sectors[(1, 0, 0)], packet_sectors[(-1, 0, 0)]
    dt = dt_max(small_tables[(0, 0, 0)])
    for _ in range(10):
        plus = step(plus, small_tables[(1, 0, 0)], dt, tracer)
        minus = step(minus, small_tables[(-1, 0, 0)], dt, tracer)
    # rho_{-d}(P) = conj rho_d(P + d)
    idx = np.flatnonzero(plus.mask)
    shifted = small_grid.flat_index(small_grid.index3[idx] - plus.delta)
    assert np.max(np.abs(minus.rho[shifted] - np.conj(plus.rho[idx]))) < 1e-10 * np.abs(plus.rho).max()


def test_diagonal_matches_classical_stepper(small_grid, small_tables):
    st = gaussian_state(small_grid, 0.9, (0.5, -0.3, 0.0))
    t = small_tables[(0, 0, 0)]
    dt = dt_max(t)
    q, c = st, st
    for _ in range(5):
        q = collision_step(q, t, dt)
        c = lbe_step(c, t, dt)
    assert np.max(np.abs(q.rho - c.rho)) < 1e-10 * np.max(st.rho)


def test_entropy_monitor(small_grid, small_tables, gas, tracer):
    th = thermal_state(small_grid, gas, tracer)
    assert entropy_monitor(th, th) == pytest.approx(0.0, abs=1e-14)
    cold = gaussian_state(small_grid, 0.9)
    h0 = entropy_monitor(cold, th)
    assert h0 > 0
    after = step(cold, small_tables[(0, 0, 0)], dt_max(small_tables[(0, 0, 0)]), tracer)
    assert entropy_monitor(after, th) <= h0 + 1e-8
    bad = cold.copy()
    bad.rho[0] = -1e-6
    with pytest.raises(MonitorViolation):
        entropy_monitor(bad, th)


def test_pure_state_is_positive(packet_sectors):
    rep = two_point_positivity(packet_sectors)
    assert rep["min_eigenvalue"] >= -1e-14
    assert rep["pairs"] > 0


def test_positivity_after_steps_and_corruption(packet_sectors, small_tables, tracer):
    dt = dt_max(small_tables[(0, 0, 0)])
    secs = dict(packet_sectors)
    for _ in range(10):
        secs = {k: step(s, small_tables[k], dt, tracer) for k, s in secs.items()}
    assert two_point_positivity(secs)["ok"]
    bad = dict(secs)
    broken = secs[(1, 0, 0)].copy()
    broken.rho = broken.rho * 10.0
    bad[(1, 0, 0)] = broken
    rep = two_point_positivity(bad)
    assert not rep["ok"]
    assert rep["location"]["delta"] == [1, 0, 0]


def test_positivity_sampling(packet_sectors):
    rep = two_point_positivity(packet_sectors, samples=50, rng=np.random.default_rng(1))
    assert rep["pairs"] == 150


def test_evolve_zero_density_constant(small_grid, tracer, model, packet_sectors):
    tabs = tabulate(small_grid, [np.array([1, 0, 0]) * small_grid.spacing], GasSpec(number_density=0.0),
                    tracer, model)
    tables = {tuple(int(v) for v in t.delta): t for t in tabs}
    initial = {k: packet_sectors[k] for k in tables}
    res = evolve(initial, tables, 1.0, 0.1, tracer)
    for name in ("trace", "energy", "l1[d1_0_0]"):
        col = res.column(name)
        assert np.allclose(col, col[0], rtol=0, atol=1e-14), name
    assert len(res.records) == 11


def test_evolve_raise_and_warn(small_grid, small_tables, gas, tracer):
    st = gaussian_state(small_grid, 0.9)
    t = small_tables[(0, 0, 0)]
    th = thermal_state(small_grid, gas, tracer)
    dt = dt_max(t)
    res = evolve({(0, 0, 0): st}, {(0, 0, 0): t}, 3 * dt, dt, tracer, th, MonitorTolerances())
    assert not res.violations
    # a negative tolerance trips on every step
    with pytest.raises(MonitorViolation):
        evolve({(0, 0, 0): st}, {(0, 0, 0): t}, 3 * dt, dt, tracer, th,
               MonitorTolerances(trace=-1.0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = evolve({(0, 0, 0): st}, {(0, 0, 0): t}, 3 * dt, dt, tracer, th,
                     MonitorTolerances(trace=-1.0), on_violation="warn")
    assert len(res.violations) == 3
    assert caught


def test_evolve_needs_tables(packet_sectors, small_tables, tracer):
    with pytest.raises(GridMismatchError):
        evolve({(1, 0, 0): packet_sectors[(1, 0, 0)]}, {(0, 0, 0): small_tables[(0, 0, 0)]}, 1.0, 0.1, tracer)


def test_monitor_csv_deterministic(tmp_path, packet_sectors, small_tables, gas, tracer):
    dt = dt_max(small_tables[(0, 0, 0)])
    initial = {k: packet_sectors[k] for k in [(0, 0, 0), (1, 0, 0)]}
    th = thermal_state(packet_sectors[(0, 0, 0)].grid, gas, tracer)
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        evolve(initial, small_tables, 4 * dt, dt, tracer, th, positivity_every=2, csv_path=p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    head = paths[0].read_text().splitlines()[0].split(",")
    assert head[:2] == ["time", "trace"]
    assert "min_minor" in head


@pytest.mark.parametrize("mass", [math.inf, 100.0])
def test_coherence_decay_is_exponential(gas, model, mass):
    tracer = TracerSpec(mass)
    grid = MomentumGrid(13, 0.5, 4.0)
    tabs = tabulate(grid, [np.array([2, 0, 0]) * grid.spacing], gas, tracer, model)
    tables = {(0, 0, 0): tabs[0], (2, 0, 0): tabs[1]}
    secs = pure_state_sectors(grid, two_packets(grid, 0.5, 1.0), [(2, 0, 0)])
    dt = 0.5 * dt_max(tabs[0])
    res = evolve(secs, tables, 40 * dt, dt, tracer)
    rate, resid = fit_decay_rate(res.column("time"), res.column("l1[d2_0_0]"))
    assert rate > 0
    assert resid < 0.02


def test_fit_decay_rate_exact():
    t = np.linspace(0, 3, 20)
    rate, resid = fit_decay_rate(t, 2.5 * np.exp(-0.7 * t))
    assert rate == pytest.approx(0.7, rel=1e-12)
    assert resid < 1e-12
    assert all(math.isnan(v) for v in fit_decay_rate(t, np.zeros_like(t)))


def test_sector_state_validation(small_grid):
    with pytest.raises(GridMismatchError):
        SectorState(small_grid, np.zeros(3), np.zeros(10))
    with pytest.raises(ValueError):
        SectorState(small_grid, np.zeros(3), np.full(small_grid.size, 1j))
    st = SectorState(small_grid, (1, 0, 0), np.ones(small_grid.size))
    assert not st.rho[~st.mask].any()
