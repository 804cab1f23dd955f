from __future__ import annotations

import numpy as np
import pytest

from qlbe.core import TracerSpec
from qlbe.errors import GridMismatchError
from qlbe.grid import MomentumGrid


@pytest.mark.parametrize("n", [2, 4, 20, 1])
def test_even_or_tiny_size_rejected(n):
    with pytest.raises(ValueError):
        MomentumGrid(n, 0.5, 2.0)


def test_bad_spacing_and_q_max():
    with pytest.raises(ValueError):
        MomentumGrid(9, 0.0, 2.0)
    with pytest.raises(ValueError):
        MomentumGrid(9, float("inf"), 2.0)
    with pytest.raises(ValueError):
        MomentumGrid(9, 0.5, 0.1)


def test_origin_is_a_node():
    g = MomentumGrid(11, 0.3, 1.0)
    idx = g.node_index([0.0, 0.0, 0.0])
    assert np.array_equal(g.points[idx], np.zeros(3))
    assert idx == (g.size - 1) // 2


def test_axis_symmetric():
    g = MomentumGrid(9, 0.25, 1.0)
    assert np.allclose(g.axis, -g.axis[::-1])
    assert g.half_width == pytest.approx(1.0)


def test_for_physics_extent(gas):
    tracer = TracerSpec(2.0)
    g = MomentumGrid.for_physics(21, gas, tracer)
    assert g.half_width == pytest.approx(5.0 * tracer.thermal_momentum(gas))
    assert g.q_max == pytest.approx(4.0 * gas.p_T)
    g.check_thermal_extent(gas, tracer)


def test_thermal_extent_check_raises(gas, tracer):
    g = MomentumGrid(9, 0.2, 1.0)
    with pytest.raises(GridMismatchError):
        g.check_thermal_extent(gas, tracer)


def test_transfer_lattice_closed_under_negation():
    g = MomentumGrid(13, 0.4, 1.3)
    offs = {tuple(o) for o in g.transfer_offsets.tolist()}
    assert (0, 0, 0) not in offs
    assert all(tuple(-v for v in o) in offs for o in offs)
    norms = np.linalg.norm(g.transfers, axis=1)
    assert norms.max() <= g.q_max * (1 + 1e-12)
    assert norms.min() == pytest.approx(g.spacing)


def test_transfer_lattice_complete():
    g = MomentumGrid(9, 1.0, 2.0)
    r = np.arange(-2, 3)
    cube = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    sq = np.sum(cube**2, axis=1)
    assert g.transfer_offsets.shape[0] == int(np.sum((sq > 0) & (sq <= 4)))


def test_index_round_trip():
    g = MomentumGrid(7, 0.5, 1.0)
    flat = g.flat_index(g.index3)
    assert np.array_equal(flat, np.arange(g.size))
    rng = np.random.default_rng(3)
    for idx in rng.integers(0, g.size, 20):
        assert g.node_index(g.points[idx]) == idx


def test_off_grid_momenta_rejected():
    g = MomentumGrid(7, 0.5, 1.0)
    with pytest.raises(GridMismatchError):
        g.node_index([0.1, 0.0, 0.0])
    with pytest.raises(GridMismatchError):
        g.node_index([5.0, 0.0, 0.0])
    with pytest.raises(GridMismatchError):
        g.offset_of([0.26, 0.0, 0.0])
    with pytest.raises(GridMismatchError):
        g.offset_of([4.0, 0.0, 0.0])


def test_sector_mask_counts():
    g = MomentumGrid(7, 0.5, 1.0)
    assert g.sector_mask((0, 0, 0)).all()
    assert g.sector_mask((1, 0, 0)).sum() == 6 * 7 * 7
    assert g.sector_mask((2, -1, 0)).sum() == 5 * 6 * 7
    src = g.index3[g.sector_mask((1, 0, 0))] - (1, 0, 0)
    assert src.min() >= 0


def test_spec_round_trip():
    g = MomentumGrid(9, 0.5, 2.0)
    assert MomentumGrid(**g.spec()) == g


def test_infinite_mass_uses_gas_scale(gas):
    heavy = TracerSpec(float("inf"))
    g = MomentumGrid.for_physics(13, gas, heavy)
    assert g.half_width == pytest.approx(5.0 * gas.p_T)
    g.check_thermal_extent(gas, heavy)
