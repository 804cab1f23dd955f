"""Quantum linear Boltzmann equation: scattering kernels, momentum-space evolution and classical oracles."""

from __future__ import annotations

from .classical import Ensemble, dsmc_collide, dsmc_run, lbe_step
from .config import RunConfig
from .core import GasSpec, MaxwellDensity, TabulatedDensity, TracerSpec, mean_collision_rate, mu
from .errors import QLBEError
from .evolution import SectorState, evolve, gaussian_state, pure_state_sectors, step, thermal_state
from .grid import MomentumGrid
from .kernels import KernelTable, QuadratureSpec, eval_F, m_in, m_in_cl, m_out_cl, tabulate
from .scattering import BornGaussian, BornTabulated, ConstantLength, HardSphere, amplitude

__version__ = "0.1.0"

__all__ = [
    "BornGaussian",
    "BornTabulated",
    "ConstantLength",
    "Ensemble",
    "GasSpec",
    "HardSphere",
    "KernelTable",
    "MaxwellDensity",
    "MomentumGrid",
    "QLBEError",
    "QuadratureSpec",
    "RunConfig",
    "SectorState",
    "TabulatedDensity",
    "TracerSpec",
    "amplitude",
    "dsmc_collide",
    "dsmc_run",
    "eval_F",
    "evolve",
    "gaussian_state",
    "lbe_step",
    "m_in",
    "m_in_cl",
    "m_out_cl",
    "mean_collision_rate",
    "mu",
    "pure_state_sectors",
    "step",
    "tabulate",
    "thermal_state",
]
