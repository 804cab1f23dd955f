from __future__ import annotations

import numpy as np
import pytest

from qlbe.core import GasSpec, TracerSpec
from qlbe.grid import MomentumGrid
from qlbe.kernels import tabulate
from qlbe.scattering import ConstantLength

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_unit(rng, size=None):
    v = rng.normal(size=(3,) if size is None else (size, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture(scope="session")
def gas():
    return GasSpec()


@pytest.fixture(scope="session")
def tracer():
    return TracerSpec(1.0)


@pytest.fixture(scope="session")
def model():
    return ConstantLength(1.0)


@pytest.fixture(scope="session")
def small_grid(gas, tracer):
    return MomentumGrid.for_physics(13, gas, tracer)


@pytest.fixture(scope="session")
def small_tables(small_grid, gas, tracer, model):
    """Diagonal plus +-(1,0,0) and (0,1,0) sectors at N=13."""
    h = small_grid.spacing
    offs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0)]
    tabs = tabulate(small_grid, [np.array(o) * h for o in offs], gas, tracer, model)
    return {tuple(int(v) for v in t.delta): t for t in tabs}


@pytest.fixture(scope="session")
def std_grid(gas, tracer):
    return MomentumGrid.for_physics(21, gas, tracer)


@pytest.fixture(scope="session")
def std_diag_table(std_grid, gas, tracer, model):
    return tabulate(std_grid, [], gas, tracer, model)[0]
