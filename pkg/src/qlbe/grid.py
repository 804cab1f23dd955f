"""Uniform Cartesian momentum grid and its momentum-transfer lattice."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import GasSpec, TracerSpec
from .errors import GridMismatchError


@dataclass(frozen=True)
class MomentumGrid:
    """``n`` points per axis (odd, so P = 0 is a node) with spacing ``spacing``.

    Nodes are ``(i - (n-1)/2) * spacing``; flat index ``(i*n + j)*n + k``.
    The transfer lattice holds every nonzero grid difference vector with
    |Q| <= ``q_max``; it is closed under Q -> -Q.
    """

    n: int
    spacing: float
    q_max: float

    def __post_init__(self):
        if self.n < 3 or self.n % 2 == 0:
            raise ValueError(f"grid size must be odd and >= 3, got {self.n}")
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError("grid spacing must be positive")
        if not (self.q_max >= self.spacing):
            raise ValueError("q_max must be at least one grid spacing")

    @classmethod
    def for_physics(
        cls,
        n: int,
        gas: GasSpec,
        tracer: TracerSpec,
        extent_factor: float = 5.0,
        q_max: float | None = None,
    ) -> "MomentumGrid":
        """Grid whose half-width is ``extent_factor`` tracer thermal momenta.

        An infinitely heavy tracer has no thermal width; the gas p_T sets the
        scale instead.  ``q_max`` defaults to 4 p_T of the gas.
        """
        scale = gas.p_T if math.isinf(tracer.mass) else tracer.thermal_momentum(gas)
        half = extent_factor * scale
        spacing = 2.0 * half / (n - 1)
        if q_max is None:
            q_max = 4.0 * gas.p_T
        return cls(n=n, spacing=spacing, q_max=max(q_max, spacing))

    @property
    def half_width(self) -> float:
        return 0.5 * (self.n - 1) * self.spacing

    @property
    def cell_volume(self) -> float:
        return self.spacing**3

    @property
    def size(self) -> int:
        return self.n**3

    def check_thermal_extent(self, gas: GasSpec, tracer: TracerSpec, factor: float = 5.0) -> None:
        """Raise unless the half-width covers ``factor`` tracer thermal momenta.

        No-op for an infinitely heavy tracer, which never thermalizes.
        """
        if math.isinf(tracer.mass):
            return
        need = factor * tracer.thermal_momentum(gas)
        if self.half_width < need * (1.0 - 1e-12):
            raise GridMismatchError(
                f"grid half-width {self.half_width} < {factor} x tracer thermal momentum ({need})"
            )

    @cached_property
    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - (self.n - 1) // 2) * self.spacing

    @cached_property
    def index3(self) -> np.ndarray:
        """(size, 3) integer node coordinates in 0..n-1."""
        i = np.arange(self.n)
        return np.stack(np.meshgrid(i, i, i, indexing="ij"), axis=-1).reshape(-1, 3)

    @cached_property
    def points(self) -> np.ndarray:
        """(size, 3) node momenta."""
        return (self.index3 - (self.n - 1) // 2) * self.spacing

    @cached_property
    def transfer_offsets(self) -> np.ndarray:
        """(nQ, 3) integer offsets of the transfer lattice, lexicographic order."""
        m = min(self.n - 1, int(math.floor(self.q_max / self.spacing + 1e-9)))
        r = np.arange(-m, m + 1)
        off = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        norm = self.spacing * np.sqrt(np.sum(off.astype(float) ** 2, axis=1))
        keep = (norm > 0) & (norm <= self.q_max * (1 + 1e-12))
        return np.ascontiguousarray(off[keep])

    @cached_property
    def transfers(self) -> np.ndarray:
        return self.transfer_offsets * self.spacing

    def flat_index(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk)
        return (ijk[..., 0] * self.n + ijk[..., 1]) * self.n + ijk[..., 2]

    def node_index(self, P) -> int:
        """Flat index of the node at momentum ``P`` (must lie on the grid)."""
        P = np.asarray(P, dtype=float)
        ijk = np.rint(P / self.spacing).astype(int) + (self.n - 1) // 2
        if np.any(ijk < 0) or np.any(ijk >= self.n) or not np.allclose(
            (ijk - (self.n - 1) // 2) * self.spacing, P, atol=1e-9 * self.spacing
        ):
            raise GridMismatchError(f"{P} is not a grid node")
        return int(self.flat_index(ijk))

    def offset_of(self, delta) -> np.ndarray:
        """Integer offset of a grid difference vector ``delta``."""
        d = np.asarray(delta, dtype=float)
        off = np.rint(d / self.spacing).astype(np.int64)
        if not np.allclose(off * self.spacing, d, atol=1e-9 * self.spacing):
            raise GridMismatchError(f"{delta} is not a grid difference vector")
        if np.any(np.abs(off) > self.n - 1):
            raise GridMismatchError(f"{delta} exceeds the grid")
        return off

    def sector_mask(self, offset) -> np.ndarray:
        """Nodes P with P - delta also on the grid."""
        src = self.index3 - np.asarray(offset)
        return np.all((src >= 0) & (src < self.n), axis=1)

    def spec(self) -> dict:
        return {"n": self.n, "spacing": self.spacing, "q_max": self.q_max}
