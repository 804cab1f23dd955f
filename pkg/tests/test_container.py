from __future__ import annotations

import numpy as np
import pytest

from qlbe.container import MAGIC, load_state, load_table, read_header, save_state, save_table, write_container
from qlbe.errors import ContainerError
from qlbe.evolution import gaussian_state


def _assert_tables_equal(a, b):
    assert a.grid == b.grid
    assert np.array_equal(a.delta, b.delta)
    for name in ("values", "m_out", "zero_cell", "lost"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert a.checksum() == b.checksum()


def test_table_round_trip(tmp_path, small_tables):
    for t in small_tables.values():
        path = tmp_path / "t.qlbe"
        save_table(path, t)
        _assert_tables_equal(t, load_table(path))


def test_complex_table_round_trip(tmp_path, small_tables):
    t = small_tables[(1, 0, 0)]
    c = type(t)(t.grid, t.delta, t.values * (1 + 0.5j), t.m_out, t.zero_cell, t.lost, {})
    save_table(tmp_path / "c.qlbe", c)
    back = load_table(tmp_path / "c.qlbe")
    assert np.iscomplexobj(back.values)
    assert np.array_equal(back.values, c.values)


def test_state_round_trip(tmp_path, small_grid):
    s = gaussian_state(small_grid, 0.7, np.zeros(3))
    s.time = 1.25
    save_state(tmp_path / "s.qlbe", s)
    back = load_state(tmp_path / "s.qlbe")
    assert back.grid == s.grid
    assert np.array_equal(back.delta, s.delta)
    assert np.array_equal(back.rho, s.rho)
    assert back.time == 1.25


def test_header_is_readable(tmp_path, small_tables):
    save_table(tmp_path / "t.qlbe", small_tables[(0, 0, 0)])
    head = read_header(tmp_path / "t.qlbe")
    assert head["kind"] == "kernel_table"
    assert [b["name"] for b in head["blocks"]] == ["values", "m_out", "zero_cell", "lost"]


@pytest.fixture
def saved(tmp_path, small_tables):
    path = tmp_path / "t.qlbe"
    save_table(path, small_tables[(0, 0, 0)])
    return path


def test_bit_flip_detected(saved):
    raw = bytearray(saved.read_bytes())
    raw[-100] ^= 0x01
    saved.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="checksum"):
        load_table(saved)


def test_bad_magic(saved):
    raw = bytearray(saved.read_bytes())
    raw[0:4] = b"XXXX"
    saved.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="magic"):
        load_table(saved)


@pytest.mark.parametrize("keep", [4, 15, 40])
def test_truncated_header(saved, keep):
    saved.write_bytes(saved.read_bytes()[:keep])
    with pytest.raises(ContainerError):
        load_table(saved)


def test_truncated_payload(saved):
    saved.write_bytes(saved.read_bytes()[:-16])
    with pytest.raises(ContainerError):
        load_table(saved)


def test_wrong_version(saved):
    raw = bytearray(saved.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    saved.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="version"):
        load_table(saved)


def test_wrong_kind(tmp_path, small_grid):
    path = tmp_path / "s.qlbe"
    save_state(path, gaussian_state(small_grid, 0.7, np.zeros(3)))
    with pytest.raises(ContainerError, match="kernel_table"):
        load_table(path)


def test_inconsistent_shape(tmp_path, small_tables):
    t = small_tables[(0, 0, 0)]
    meta = dict(t.metadata)
    meta.pop("checksum")
    meta["grid"] = {"n": 9, "spacing": t.grid.spacing, "q_max": t.grid.q_max}
    blocks = {"values": t.values, "m_out": t.m_out, "zero_cell": t.zero_cell, "lost": t.lost}
    write_container(tmp_path / "x.qlbe", "kernel_table", {"metadata": meta}, blocks)
    with pytest.raises(ContainerError, match="shape"):
        load_table(tmp_path / "x.qlbe")


def test_magic_constant():
    assert len(MAGIC) == 8
