"""Elastic two-body scattering amplitudes and cross sections.

Every model is rotation invariant, so on the energy shell the amplitude is a
function of two scalars.  Kernel code parametrizes an on-shell pair by its
midpoint ``r`` and transfer ``Q = p_in - p_out`` with ``r . Q = 0``:

    p_out = r - Q/2,    p_in = r + Q/2,    k^2 = r^2 + Q^2/4.

The numba entry point :func:`amplitude_shell_nb` takes ``(r^2, Q^2)``; the
public :func:`amplitude` accepts an explicit momentum pair and rejects
off-shell input.

Wave numbers equal momenta (hbar = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import ClassVar

import numba
import numpy as np

from .core import as_momentum, gauss_legendre
from .errors import OffShellError, QuadratureError, TruncationError

SHELL_EPS = 1e-9

KIND_CONSTANT = 0
KIND_HARD_SPHERE = 1
KIND_BORN_GAUSSIAN = 2
KIND_BORN_TABULATED = 3


# ---------------------------------------------------------------------------
# spherical Bessel functions and partial waves (numba)
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def spherical_jy(x, L):
    """j_l(x), y_l(x) for l = 0..L, x > 0.

    y_l by upward recurrence (always stable).  j_l by upward recurrence when
    x > L; otherwise Miller's downward recurrence started well above
    max(L, x) and normalized against whichever of j_0, j_1 is larger.
    """
    j = np.empty(L + 1)
    y = np.empty(L + 1)
    s = math.sin(x)
    c = math.cos(x)
    y[0] = -c / x
    if L >= 1:
        y[1] = -c / (x * x) - s / x
    for l in range(1, L):
        y[l + 1] = (2 * l + 1) / x * y[l] - y[l - 1]

    j0 = s / x
    j1 = s / (x * x) - c / x
    if x > L:
        j[0] = j0
        if L >= 1:
            j[1] = j1
        for l in range(1, L):
            j[l + 1] = (2 * l + 1) / x * j[l] - j[l - 1]
        return j, y

    start = L + 20 + int(x) + int(math.sqrt(40.0 * (L + 1)))
    f_next = 0.0  # index l + 1
    f_cur = 1e-300  # index l
    for l in range(start, 0, -1):
        f_prev = (2 * l + 1) / x * f_cur - f_next
        if l <= L:
            j[l] = f_cur
        f_next = f_cur
        f_cur = f_prev
        if abs(f_cur) > 1e250:
            f_cur *= 1e-250
            f_next *= 1e-250
            for i in range(l, L + 1):
                j[i] *= 1e-250
    j[0] = f_cur
    if abs(j0) >= abs(j1) or L == 0:
        scale = j0 / j[0]
    else:
        scale = j1 / j[1]
    for l in range(L + 1):
        j[l] *= scale
    return j, y


@numba.njit(cache=True)
def default_lmax(kR):
    return int(math.ceil(2.0 * kR)) + 4


@numba.njit(cache=True)
def hard_sphere_amplitude_nb(R, lmax_fixed, k, cos_theta):
    """f(theta, k) = (1/k) sum_l (2l+1) e^{i d_l} sin d_l P_l(cos theta), tan d_l = j_l(kR)/y_l(kR)."""
    L = lmax_fixed if lmax_fixed >= 0 else default_lmax(k * R)
    j, y = spherical_jy(k * R, L)
    re = 0.0
    im = 0.0
    p_prev = 1.0
    p_cur = cos_theta
    for l in range(L + 1):
        if l == 0:
            pl = 1.0
        elif l == 1:
            pl = cos_theta
        else:
            p_next = ((2 * l - 1) * cos_theta * p_cur - (l - 1) * p_prev) / l
            p_prev = p_cur
            p_cur = p_next
            pl = p_cur
        d = j[l] * j[l] + y[l] * y[l]
        if not math.isfinite(d):
            continue  # y_l overflow: this partial wave is negligible
        # e^{i delta} sin(delta) = (j y + i j^2) / (j^2 + y^2)
        re += (2 * l + 1) * (j[l] * y[l] / d) * pl
        im += (2 * l + 1) * (j[l] * j[l] / d) * pl
    return complex(re / k, im / k)


@numba.njit(cache=True)
def hard_sphere_sigma_terms(R, lmax_fixed, k):
    """Per-l terms (4 pi / k^2)(2l+1) sin^2 d_l."""
    L = lmax_fixed if lmax_fixed >= 0 else default_lmax(k * R)
    j, y = spherical_jy(k * R, L)
    out = np.empty(L + 1)
    for l in range(L + 1):
        out[l] = 4.0 * math.pi / (k * k) * (2 * l + 1) * j[l] * j[l] / (j[l] * j[l] + y[l] * y[l])
    return out


@numba.njit(cache=True)
def amplitude_shell_nb(kind, par, tx, ty, r2, q2):
    """On-shell amplitude from |r|^2 and |Q|^2 (see module docstring)."""
    if kind == KIND_CONSTANT:
        return complex(-par[0], 0.0)
    if kind == KIND_BORN_GAUSSIAN:
        return complex(-par[0] * math.exp(-q2 * par[1] * par[1]), 0.0)
    if kind == KIND_BORN_TABULATED:
        q = math.sqrt(q2)
        if q >= tx[-1]:
            return complex(0.0, 0.0)
        return complex(np.interp(q, tx, ty), 0.0)
    k2 = r2 + 0.25 * q2
    k = math.sqrt(k2)
    cos_theta = (r2 - 0.25 * q2) / k2
    if cos_theta > 1.0:
        cos_theta = 1.0
    elif cos_theta < -1.0:
        cos_theta = -1.0
    return hard_sphere_amplitude_nb(par[0], int(par[1]), k, cos_theta)


@numba.njit(cache=True)
def _amplitude_shell_many(kind, par, tx, ty, r2, q2):
    out = np.empty(r2.size, dtype=np.complex128)
    for i in range(r2.size):
        out[i] = amplitude_shell_nb(kind, par, tx, ty, r2[i], q2[i])
    return out


@numba.njit(cache=True)
def amplitude_row_nb(kind, par, tx, ty, r2, q2, out):
    """out[i] = amplitude at (r2[i], q2) for one fixed transfer; dispatch hoisted out of the loop."""
    if kind != KIND_HARD_SPHERE:
        # every other model depends on the transfer alone
        value = amplitude_shell_nb(kind, par, tx, ty, 0.0, q2)
        for i in range(r2.size):
            out[i] = value
        return
    for i in range(r2.size):
        out[i] = amplitude_shell_nb(kind, par, tx, ty, r2[i], q2)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScatteringModel:
    """Base class.  Subclasses set ``kind`` and supply closed forms."""

    kind: ClassVar[int] = -1

    @property
    def k_independent(self) -> bool:
        """True when the on-shell amplitude depends on the transfer |Q| alone."""
        return False

    def numba_args(self):
        raise NotImplementedError

    def amplitude_shell(self, r2, q2) -> np.ndarray:
        r2 = np.asarray(r2, dtype=float)
        q2 = np.asarray(q2, dtype=float)
        r2, q2 = np.broadcast_arrays(r2, q2)
        kind, par, tx, ty = self.numba_args()
        out = _amplitude_shell_many(kind, par, tx, ty, r2.ravel().copy(), q2.ravel().copy())
        return out.reshape(r2.shape)

    def amplitude_k(self, k, cos_theta) -> np.ndarray:
        """Amplitude at wave number ``k`` and scattering angle ``theta``."""
        k = np.asarray(k, dtype=float)
        c = np.asarray(cos_theta, dtype=float)
        q2 = 2.0 * k * k * (1.0 - c)
        r2 = 0.5 * k * k * (1.0 + c)
        return self.amplitude_shell(r2, q2)

    def total_cross_section_k(self, k) -> np.ndarray:
        return self._sigma_quadrature(np.asarray(k, dtype=float), 64)[0]

    def _sigma_quadrature(self, k, order):
        c, w = gauss_legendre(order)
        k = np.atleast_1d(k)
        f = self.amplitude_k(k[:, None], c[None, :])
        return 2.0 * math.pi * (np.abs(f) ** 2 @ w), None

    def sigma_max(self) -> float:
        """An upper bound of sigma(k) over all k (null-collision majorant)."""
        ks = np.concatenate([[1e-6], np.geomspace(1e-3, 1e3, 400)])
        return float(np.max(self.total_cross_section_k(ks))) * 1.05

    def dsigma_domega_k(self, k, cos_theta) -> np.ndarray:
        return np.abs(self.amplitude_k(k, cos_theta)) ** 2


def _on_shell_scalars(p_out, p_in):
    p_out = as_momentum(p_out, "p_out")
    p_in = as_momentum(p_in, "p_in")
    k_out = np.linalg.norm(p_out, axis=-1)
    k_in = np.linalg.norm(p_in, axis=-1)
    if np.any(np.abs(k_out - k_in) > SHELL_EPS * np.maximum(k_in, np.finfo(float).tiny)):
        raise OffShellError("amplitude requested off the energy shell")
    r = 0.5 * (p_out + p_in)
    q = p_in - p_out
    return np.einsum("...i,...i->...", r, r), np.einsum("...i,...i->...", q, q), k_in


@dataclass(frozen=True)
class ConstantLength(ScatteringModel):
    """f = -a at all energies and angles; sigma = 4 pi a^2."""

    a: float = 1.0

    def __post_init__(self):
        if not (self.a >= 0 and math.isfinite(self.a)):
            raise ValueError("scattering length must be >= 0")

    kind = KIND_CONSTANT

    @property
    def k_independent(self) -> bool:
        return True

    def numba_args(self):
        return KIND_CONSTANT, np.array([self.a]), np.zeros(1), np.zeros(1)

    def total_cross_section_k(self, k):
        return np.full(np.shape(k), 4.0 * math.pi * self.a**2)

    def sigma_max(self) -> float:
        return 4.0 * math.pi * self.a**2


@dataclass(frozen=True)
class HardSphere(ScatteringModel):
    """Impenetrable sphere of radius R, partial waves up to ``l_max``.

    ``l_max = None`` selects ceil(2 k R) + 4 per wave number.
    """

    R: float = 1.0
    l_max: int | None = None

    def __post_init__(self):
        if not (self.R > 0 and math.isfinite(self.R)):
            raise ValueError("hard-sphere radius must be positive")
        if self.l_max is not None and self.l_max < 0:
            raise ValueError("l_max must be >= 0")

    kind = KIND_HARD_SPHERE

    def numba_args(self):
        lmax = -1 if self.l_max is None else self.l_max
        return KIND_HARD_SPHERE, np.array([self.R, float(lmax)]), np.zeros(1), np.zeros(1)

    def sigma_terms(self, k: float) -> np.ndarray:
        lmax = -1 if self.l_max is None else self.l_max
        return hard_sphere_sigma_terms(self.R, lmax, float(k))

    def total_cross_section_k(self, k):
        k = np.asarray(k, dtype=float)
        flat = np.array([np.sum(self.sigma_terms(x)) for x in k.ravel()])
        return flat.reshape(k.shape)

    def sigma_max(self) -> float:
        # sigma(k) <= 4 pi R^2, reached as k -> 0; margin covers truncation
        return 4.0 * math.pi * self.R**2 * 1.05

    def phase_shifts(self, k: float) -> np.ndarray:
        lmax = default_lmax(k * self.R) if self.l_max is None else self.l_max
        j, y = spherical_jy(k * self.R, lmax)
        return np.arctan(j / y)


@dataclass(frozen=True)
class BornGaussian(ScatteringModel):
    """Born amplitude f_B(Q) = -a exp(-Q^2 w^2), a function of the transfer only."""

    a: float = 1.0
    w: float = 0.5

    def __post_init__(self):
        if not (self.a >= 0 and self.w > 0):
            raise ValueError("BornGaussian needs a >= 0 and w > 0")

    kind = KIND_BORN_GAUSSIAN

    @property
    def k_independent(self) -> bool:
        return True

    def numba_args(self):
        return KIND_BORN_GAUSSIAN, np.array([self.a, self.w]), np.zeros(1), np.zeros(1)

    def total_cross_section_k(self, k):
        # 2 pi a^2 int exp(-4 w^2 k^2 (1 - c)) dc
        k = np.asarray(k, dtype=float)
        x = 4.0 * self.w**2 * k**2
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(x > 0, -np.expm1(-2.0 * x) / np.where(x > 0, x, 1.0), 2.0)
        return 2.0 * math.pi * self.a**2 * ratio

    def sigma_max(self) -> float:
        return 4.0 * math.pi * self.a**2


@dataclass(frozen=True)
class BornTabulated(ScatteringModel):
    """Born amplitude tabulated on increasing transfers, zero beyond the table."""

    transfers: tuple
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "transfers", tuple(float(x) for x in self.transfers))
        object.__setattr__(self, "values", tuple(float(x) for x in self.values))
        q = np.asarray(self.transfers)
        if q.size < 2 or q.size != len(self.values) or np.any(np.diff(q) <= 0) or q[0] != 0.0:
            raise ValueError("transfers must start at 0 and increase strictly")

    kind = KIND_BORN_TABULATED

    @property
    def k_independent(self) -> bool:
        return True

    def numba_args(self):
        return (
            KIND_BORN_TABULATED,
            np.zeros(1),
            np.asarray(self.transfers, dtype=float),
            np.asarray(self.values, dtype=float),
        )


def amplitude(model: ScatteringModel, p_out, p_in) -> np.ndarray:
    """Scattering amplitude f(p_out, p_in) for an on-shell pair (complex length)."""
    r2, q2, _ = _on_shell_scalars(p_out, p_in)
    return model.amplitude_shell(r2, q2)


def differential_cross_section(model: ScatteringModel, p_out, p_in) -> np.ndarray:
    return np.abs(amplitude(model, p_out, p_in)) ** 2


def total_cross_section(
    model: ScatteringModel,
    p_in,
    method: str = "closed",
    order: int = 64,
    max_error: float = 1e-2,
) -> float:
    """Total cross section at incoming relative momentum ``p_in``.

    ``method="closed"`` uses the closed form where one exists (partial-wave
    sum for hard spheres); ``"quadrature"`` integrates |f|^2 over the sphere
    with Gauss-Legendre in cos(theta) (the amplitude is axially symmetric).
    Estimated truncation or quadrature errors above ``max_error`` (relative)
    raise.
    """
    p_in = as_momentum(p_in, "p_in")
    k = float(np.linalg.norm(p_in))
    if k == 0.0 and not isinstance(model, ConstantLength):
        raise ValueError("total cross section needs |p_in| > 0")
    if method == "quadrature":
        coarse = model._sigma_quadrature(np.array([k]), order)[0][0]
        fine = model._sigma_quadrature(np.array([k]), 2 * order)[0][0]
        err = abs(fine - coarse)
        if fine > 0 and err > max_error * fine:
            raise QuadratureError("spherical quadrature of |f|^2 did not converge", fine, err)
        return float(fine)
    if method != "closed":
        raise ValueError(f"unknown method {method!r}")
    if isinstance(model, HardSphere):
        terms = model.sigma_terms(k)
        total = float(np.sum(terms))
        if total > 0 and terms[-1] > max_error * total:
            raise TruncationError("partial-wave sum truncated too early", total, float(terms[-1]))
        return total
    return float(np.asarray(model.total_cross_section_k(k)))
