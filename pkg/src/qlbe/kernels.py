"""Jump-operator function F, collision kernels and their tabulation on a grid.

F(K, P; Q) = sqrt(n m)/m* f(rel(K_perp, P_perp) - Q/2, rel(K_perp, P_perp) + Q/2)
             * mu(K_perp + (1 + m/M) Q/2 + (m/M) P_par)^(1/2)

with perp/par taken with respect to Q.  The kernel

    m_in(P, P'; Q) = (1/|Q|) int_{Q-perp} d^2K F(K, P-Q; Q) conj F(K, P'-Q; Q)

is a 2-D tensor Gauss-Legendre sum over the plane orthogonal to Q.

Discretization of the transfer integral
---------------------------------------
The evolution sums Q over the grid's transfer lattice (Q = 0 excluded).  Near
Q = 0 the kernel behaves like A(Q_hat)/|Q|; the lattice sum of such a term
misses ``EPSTEIN_SC * h^2 * <A>`` relative to the integral (``EPSTEIN_SC`` is
minus the Epstein zeta value Z(1) of the simple cubic lattice).  Tables carry
this as a per-node self-weight ``zero_cell``.  It enters gain and loss of the
diagonal sector identically, so it never affects probability conservation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import (
    DEFAULT_CUTOFF,
    GasSpec,
    MaxwellDensity,
    TracerSpec,
    _check_pair,
    as_momentum,
    gauss_legendre,
    sqrt_mu_row_nb,
)
from .errors import DegenerateDirectionError, GridMismatchError, QuadratureError
from .grid import MomentumGrid
from .scattering import ScatteringModel, amplitude, amplitude_row_nb

EPSTEIN_SC = 2.8372974794806  # -Z(1) for the simple cubic lattice


@dataclass(frozen=True)
class QuadratureSpec:
    """Quadrature settings for kernel evaluation.

    ``route``: "auto" uses the separable closed sum when the amplitude depends
    on |Q| only and the gas is Maxwellian, "quadrature" always runs the full
    in-plane sum, "separable" insists on the closed sum.

    ``n_quad = None`` picks the order per model: 32 when the amplitude
    depends on |Q| alone (the plane integrand is then a pure Gaussian), 64
    otherwise; hard-sphere amplitudes carry a branch point at distance
    ~|Q|/2 from the integration plane and converge more slowly.
    """

    n_quad: int | None = None
    cutoff: float = DEFAULT_CUTOFF
    zero_cell: bool = True
    zero_cell_order: int = 8
    route: str = "auto"

    def __post_init__(self):
        if self.n_quad is not None and self.n_quad < 2:
            raise ValueError("n_quad must be >= 2")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        if self.zero_cell_order < 1:
            raise ValueError("zero_cell_order must be >= 1")
        if self.route not in ("auto", "quadrature", "separable"):
            raise ValueError(f"unknown route {self.route!r}")

    def order(self, model: ScatteringModel) -> int:
        if self.n_quad is not None:
            return self.n_quad
        return 32 if model.k_independent else 64

    def k_max(self, gas: GasSpec) -> float:
        return self.cutoff * gas.distribution.scale

    def as_dict(self) -> dict:
        return {
            "n_quad": self.n_quad,
            "cutoff": self.cutoff,
            "zero_cell": self.zero_cell,
            "zero_cell_order": self.zero_cell_order,
            "route": self.route,
        }


# ---------------------------------------------------------------------------
# numba core
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _source_row(out, S, qhat, qn, e1, e2, x, sw, r, pref, kind, par, tx, ty, mkind, mpar, mx, my):
    """out[n] = sqrt(w_n) F(K_n, S; Q) over the in-plane tensor nodes."""
    s_par = S[0] * qhat[0] + S[1] * qhat[1] + S[2] * qhat[2]
    a = 1.0 / (1.0 + r)
    b = r / (1.0 + r)
    sp0 = b * (S[0] - s_par * qhat[0])
    sp1 = b * (S[1] - s_par * qhat[1])
    sp2 = b * (S[2] - s_par * qhat[2])
    c = 0.5 * (1.0 + r) * qn + r * s_par
    nq = x.size
    nn = nq * nq
    r2 = np.empty(nn)
    m2 = np.empty(nn)
    for i in range(nq):
        for j in range(nq):
            k0 = x[i] * e1[0] + x[j] * e2[0]
            k1 = x[i] * e1[1] + x[j] * e2[1]
            k2 = x[i] * e1[2] + x[j] * e2[2]
            R0 = a * k0 - sp0
            R1 = a * k1 - sp1
            R2 = a * k2 - sp2
            r2[i * nq + j] = R0 * R0 + R1 * R1 + R2 * R2
            m2[i * nq + j] = k0 * k0 + k1 * k1 + k2 * k2 + c * c
    amplitude_row_nb(kind, par, tx, ty, r2, qn * qn, out)
    smu = np.empty(nn)
    sqrt_mu_row_nb(mkind, mpar, mx, my, m2, smu)
    for i in range(nq):
        for j in range(nq):
            n = i * nq + j
            out[n] = (sw[i] * sw[j] * pref * smu[n]) * out[n]


@numba.njit(cache=True)
def _cdot(a, b):
    """sum a * conj(b) with explicit real arithmetic (bitwise Hermitian pairing)."""
    re = 0.0
    im = 0.0
    for n in range(a.size):
        ar = a[n].real
        ai = a[n].imag
        br = b[n].real
        bi = b[n].imag
        re += ar * br + ai * bi
        im += ai * br - ar * bi
    return complex(re, im)


@numba.njit(cache=True)
def _m_in_pair(S, Sp, qhat, qn, e1, e2, x, sw, r, pref, kind, par, tx, ty, mkind, mpar, mx, my):
    nn = x.size * x.size
    h1 = np.empty(nn, dtype=np.complex128)
    h2 = np.empty(nn, dtype=np.complex128)
    _source_row(h1, S, qhat, qn, e1, e2, x, sw, r, pref, kind, par, tx, ty, mkind, mpar, mx, my)
    _source_row(h2, Sp, qhat, qn, e1, e2, x, sw, r, pref, kind, par, tx, ty, mkind, mpar, mx, my)
    return _cdot(h1, h2)


# ---------------------------------------------------------------------------
# python-level helpers
# ---------------------------------------------------------------------------


def plane_basis(Q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Q_hat, e1, e2): e1 from the coordinate axis least aligned with Q, e2 = Q_hat x e1."""
    Q = as_momentum(Q, "Q")
    qn = float(np.linalg.norm(Q))
    if qn == 0.0:
        raise DegenerateDirectionError("plane basis of a zero transfer")
    qhat = Q / qn
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(qhat)))] = 1.0
    e1 = axis - np.dot(axis, qhat) * qhat
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(qhat, e1)
    return qhat, e1, e2


def _physics_args(gas: GasSpec, tracer: TracerSpec, model: ScatteringModel):
    _check_pair(gas, tracer)
    r = tracer.mass_ratio
    pref = math.sqrt(gas.number_density * gas.mass) / tracer.reduced_mass
    return r, pref, model.numba_args(), gas.distribution.numba_args()


def _nodes(gas: GasSpec, quad: QuadratureSpec, model: ScatteringModel, n_quad: int | None = None):
    n = quad.order(model) if n_quad is None else n_quad
    x, w = gauss_legendre(n, -quad.k_max(gas), quad.k_max(gas))
    return np.array(x), np.sqrt(w)


def F_factors(K, P, Q, gas: GasSpec, tracer: TracerSpec, model: ScatteringModel):
    """(prefactor, amplitude, sqrt(mu)) whose product is F(K, P; Q).

    K is projected onto the plane orthogonal to Q before use.
    """
    K = as_momentum(K, "K")
    P = as_momentum(P, "P")
    Q = as_momentum(Q, "Q")
    _check_pair(gas, tracer)
    K, P, Q = np.broadcast_arrays(K, P, Q)
    q2 = np.einsum("...i,...i->...", Q, Q)
    if np.any(q2 == 0.0):
        raise DegenerateDirectionError("F is undefined at Q = 0")
    qn = np.sqrt(q2)
    qhat = Q / qn[..., None]
    K_perp = K - np.einsum("...i,...i->...", K, qhat)[..., None] * qhat
    p_par = np.einsum("...i,...i->...", P, qhat)
    P_perp = P - p_par[..., None] * qhat
    r = tracer.mass_ratio
    R = K_perp / (1.0 + r) - (r / (1.0 + r)) * P_perp
    f = model.amplitude_shell(np.einsum("...i,...i->...", R, R), q2)
    c = 0.5 * (1.0 + r) * qn + r * p_par
    m2 = np.einsum("...i,...i->...", K_perp, K_perp) + c * c
    pref = math.sqrt(gas.number_density * gas.mass) / tracer.reduced_mass
    return pref, f, np.sqrt(gas.distribution.radial(m2))


def eval_F(K, P, Q, gas: GasSpec, tracer: TracerSpec, model: ScatteringModel):
    pref, f, smu = F_factors(K, P, Q, gas, tracer, model)
    return pref * f * smu


def m_in(
    P,
    Pp,
    Q,
    gas: GasSpec,
    tracer: TracerSpec,
    model: ScatteringModel,
    quad: QuadratureSpec = QuadratureSpec(),
    check: bool = False,
    rtol: float = 1e-6,
) -> complex:
    """Two-sided in-rate density m_in(P, P'; Q) (complex).

    ``check=True`` also evaluates at twice the order and raises
    :class:`QuadratureError` if the two differ by more than ``rtol``.
    """
    P = as_momentum(P, "P")
    Pp = as_momentum(Pp, "Pp")
    qhat, e1, e2 = plane_basis(Q)
    Q = as_momentum(Q, "Q")
    qn = float(np.linalg.norm(Q))
    r, pref, (kind, par, tx, ty), (mk, mp, mx, my) = _physics_args(gas, tracer, model)

    def run(order):
        x, sw = _nodes(gas, quad, model, order)
        v = _m_in_pair(P - Q, Pp - Q, qhat, qn, e1, e2, x, sw, r, pref,
                       kind, par, tx, ty, mk, mp, mx, my)
        return v / qn

    value = run(quad.order(model))
    if check:
        fine = run(2 * quad.order(model))
        err = abs(fine - value)
        if err > rtol * max(abs(fine), np.finfo(float).tiny):
            raise QuadratureError("in-plane kernel quadrature did not converge", abs(fine), err)
    return value


def m_in_cl(
    P,
    Q,
    gas: GasSpec,
    tracer: TracerSpec,
    model: ScatteringModel,
    quad: QuadratureSpec = QuadratureSpec(),
) -> float:
    """Classical rate density for the jump P - Q -> P.

    (n/m*) int d^3K mu(K) delta(Q^2/2 - p_ci.Q) |f(p_cf, p_ci)|^2 with
    p_ci = rel(K, P - Q), p_cf = p_ci - Q.  The delta pins the K component
    along Q; the remaining plane is integrated on Gauss-Legendre nodes.
    Written with plain numpy and the public amplitude (shell-checked).
    """
    _check_pair(gas, tracer)
    P = as_momentum(P, "P")
    Q = as_momentum(Q, "Q")
    qhat, e1, e2 = plane_basis(Q)
    qn = float(np.linalg.norm(Q))
    ms = tracer.reduced_mass
    m = gas.mass
    source = P - Q
    inv_M = 0.0 if math.isinf(tracer.mass) else 1.0 / tracer.mass
    # delta root: (m*/m) K_par |Q| - m* (S.Q)/M = Q^2/2
    k_par = (0.5 * qn * qn + ms * inv_M * float(np.dot(source, Q))) / ((ms / m) * qn)
    jac = (ms / m) * qn
    k_max = quad.k_max(gas)
    x, w = gauss_legendre(quad.order(model), -k_max, k_max)
    X, Y = np.meshgrid(x, x, indexing="ij")
    Wt = np.outer(w, w)
    K = X[..., None] * e1 + Y[..., None] * e2 + k_par * qhat
    p_ci = (ms / m) * K - ms * inv_M * source
    p_cf = p_ci - Q
    dsig = np.abs(amplitude(model, p_cf, p_ci)) ** 2
    dens = gas.distribution(K)
    return float(gas.number_density / ms / jac * np.sum(Wt * dens * dsig))


# ---------------------------------------------------------------------------
# tabulation
# ---------------------------------------------------------------------------


def sphere_directions(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Product rule on the unit sphere: GL in cos(theta) x 2*order azimuths; weights sum to 1."""
    c, wc = gauss_legendre(order)
    nphi = 2 * order
    phi = (np.arange(nphi) + 0.5) * (2.0 * math.pi / nphi)
    s = np.sqrt(1.0 - c**2)
    dirs = np.stack(
        [np.outer(s, np.cos(phi)), np.outer(s, np.sin(phi)), np.outer(c, np.ones(nphi))], axis=-1
    ).reshape(-1, 3)
    weights = np.repeat(np.asarray(wc) / 2.0, nphi) / nphi
    return dirs, weights


@dataclass
class KernelTable:
    """Tabulated kernel of one coherence sector.

    ``values[p, q] = m_in(P_p, P_p - Delta; Q_q)`` (stored real when every
    entry is real, as on the separable route); zero where P_p, P_p - Delta
    or either source P - Q, P - Delta - Q lies off the grid.  ``m_out``,
    ``zero_cell`` and ``lost`` are per-node vectors (see module docstring);
    ``lost`` is the rate toward targets outside the grid, omitted from
    ``m_out`` so the diagonal sector conserves probability exactly.
    """

    grid: MomentumGrid
    delta: np.ndarray  # integer offset
    values: np.ndarray
    m_out: np.ndarray
    zero_cell: np.ndarray
    lost: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def is_diagonal(self) -> bool:
        return not np.any(self.delta)

    @property
    def delta_momentum(self) -> np.ndarray:
        return self.delta * self.grid.spacing

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.delta.astype("<i8"), self.values, self.m_out, self.zero_cell, self.lost):
            a = np.ascontiguousarray(arr)
            if np.iscomplexobj(a):
                a = a.astype("<c16")
            else:
                a = a.astype("<f8") if a.dtype.kind == "f" else a
            h.update(a.tobytes())
        return h.hexdigest()

    def check_compatible(self, grid: MomentumGrid, delta=None) -> None:
        if grid != self.grid:
            raise GridMismatchError(f"table built for {self.grid}, got {grid}")
        if delta is not None and not np.array_equal(np.asarray(delta), self.delta):
            raise GridMismatchError(f"table built for offset {self.delta.tolist()}, got {list(delta)}")


def _use_separable(model, gas, quad) -> bool:
    ok = model.k_independent and isinstance(gas.distribution, MaxwellDensity)
    if quad.route == "separable" and not ok:
        raise ValueError("separable route needs a |Q|-only amplitude and a Maxwell gas")
    return ok and quad.route != "quadrature"


@numba.njit(cache=True)
def _in_grid(i, j, k, n):
    return 0 <= i < n and 0 <= j < n and 0 <= k < n


@numba.njit(cache=True)
def _tabulate_separable(n, h, offsets, deltas, A, r, pt, T0, Td, lost):
    """Separable route: entries A_q exp(-(c^2 + c'^2)/(2 p_T^2))."""
    nq = offsets.shape[0]
    nd = deltas.shape[0]
    half = (n - 1) // 2
    inv = 1.0 / (2.0 * pt * pt)
    for q in range(nq):
        o0 = offsets[q, 0]
        o1 = offsets[q, 1]
        o2 = offsets[q, 2]
        qn = h * math.sqrt(o0 * o0 + o1 * o1 + o2 * o2)
        c_base = 0.5 * (1.0 + r) * qn
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    s = (i * n + j) * n + k
                    # S . Q_hat with S = (i-half, j-half, k-half) h
                    sq = h * h * ((i - half) * o0 + (j - half) * o1 + (k - half) * o2) / qn
                    c = c_base + r * sq
                    val = A[q] * math.exp(-2.0 * c * c * inv)
                    ti = i + o0
                    tj = j + o1
                    tk = k + o2
                    if _in_grid(ti, tj, tk, n):
                        p = (ti * n + tj) * n + tk
                        T0[p, q] = val
                        for d in range(nd):
                            si = i - deltas[d, 0]
                            sj = j - deltas[d, 1]
                            sk = k - deltas[d, 2]
                            pi_ = ti - deltas[d, 0]
                            pj = tj - deltas[d, 1]
                            pk = tk - deltas[d, 2]
                            if _in_grid(si, sj, sk, n) and _in_grid(pi_, pj, pk, n):
                                sq2 = h * h * ((si - half) * o0 + (sj - half) * o1 + (sk - half) * o2) / qn
                                c2 = c_base + r * sq2
                                Td[d, p, q] = A[q] * math.exp(-(c * c + c2 * c2) * inv)
                    else:
                        lost[s] += val * h * h * h


@numba.njit(cache=True)
def _zero_cell_separable(n, h, deltas, dirs, dw, B, r, pt, Z0, Zd):
    half = (n - 1) // 2
    inv = 1.0 / (2.0 * pt * pt)
    nd = deltas.shape[0]
    for i in range(n):
        for j in range(n):
            for k in range(n):
                p = (i * n + j) * n + k
                acc = 0.0
                for m in range(dirs.shape[0]):
                    c = r * h * ((i - half) * dirs[m, 0] + (j - half) * dirs[m, 1] + (k - half) * dirs[m, 2])
                    acc += dw[m] * math.exp(-2.0 * c * c * inv)
                Z0[p] = B * acc
                for d in range(nd):
                    si = i - deltas[d, 0]
                    sj = j - deltas[d, 1]
                    sk = k - deltas[d, 2]
                    if not _in_grid(si, sj, sk, n):
                        continue
                    acc = 0.0
                    for m in range(dirs.shape[0]):
                        c = r * h * ((i - half) * dirs[m, 0] + (j - half) * dirs[m, 1] + (k - half) * dirs[m, 2])
                        c2 = r * h * ((si - half) * dirs[m, 0] + (sj - half) * dirs[m, 1] + (sk - half) * dirs[m, 2])
                        acc += dw[m] * math.exp(-(c * c + c2 * c2) * inv)
                    Zd[d, p] = B * acc


@numba.njit(cache=True)
def _fill_rows(H, n, h, qhat, qn, e1, e2, x, sw, r, pref, kind, par, tx, ty, mkind, mpar, mx, my):
    half = (n - 1) // 2
    S = np.empty(3)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                s = (i * n + j) * n + k
                S[0] = (i - half) * h
                S[1] = (j - half) * h
                S[2] = (k - half) * h
                _source_row(H[s], S, qhat, qn, e1, e2, x, sw, r, pref,
                            kind, par, tx, ty, mkind, mpar, mx, my)


@numba.njit(cache=True)
def _scatter_generic(H, n, h, off, q, qn, deltas, T0, Td, lost):
    nd = deltas.shape[0]
    for i in range(n):
        for j in range(n):
            for k in range(n):
                s = (i * n + j) * n + k
                rate = 0.0
                for m in range(H.shape[1]):
                    rate += H[s, m].real * H[s, m].real + H[s, m].imag * H[s, m].imag
                rate /= qn
                ti = i + off[0]
                tj = j + off[1]
                tk = k + off[2]
                if not _in_grid(ti, tj, tk, n):
                    lost[s] += rate * h * h * h
                    continue
                p = (ti * n + tj) * n + tk
                T0[p, q] = rate
                for d in range(nd):
                    si = i - deltas[d, 0]
                    sj = j - deltas[d, 1]
                    sk = k - deltas[d, 2]
                    if _in_grid(si, sj, sk, n) and _in_grid(ti - deltas[d, 0], tj - deltas[d, 1], tk - deltas[d, 2], n):
                        s2 = (si * n + sj) * n + sk
                        Td[d, p, q] = _cdot(H[s], H[s2]) / qn


@numba.njit(cache=True)
def _zero_cell_generic(H, n, deltas, weight, Z0, Zd):
    """Accumulate one direction's contribution weight * sum H[p] conj H[p - Delta]."""
    nd = deltas.shape[0]
    for i in range(n):
        for j in range(n):
            for k in range(n):
                p = (i * n + j) * n + k
                acc = 0.0
                for m in range(H.shape[1]):
                    acc += H[p, m].real * H[p, m].real + H[p, m].imag * H[p, m].imag
                Z0[p] += weight * acc
                for d in range(nd):
                    si = i - deltas[d, 0]
                    sj = j - deltas[d, 1]
                    sk = k - deltas[d, 2]
                    if _in_grid(si, sj, sk, n):
                        Zd[d, p] += weight * _cdot(H[p], H[(si * n + sj) * n + sk])


def tabulate(
    grid: MomentumGrid,
    deltas,
    gas: GasSpec,
    tracer: TracerSpec,
    model: ScatteringModel,
    quad: QuadratureSpec = QuadratureSpec(),
    progress=None,
) -> list[KernelTable]:
    """Tabulate the diagonal sector and every requested offset in one pass.

    ``deltas`` are momentum offsets (grid difference vectors); the diagonal
    table is always built first and returned first, followed by one table per
    nonzero offset.  ``progress(done, total)`` is called once per transfer.
    """
    r, pref, (kind, par, tx, ty), (mk, mp, mx, my) = _physics_args(gas, tracer, model)
    offs = []
    for d in deltas:
        o = grid.offset_of(as_momentum(d, "delta"))
        if np.any(o) and not any(np.array_equal(o, x) for x in offs):
            offs.append(o)
    dint = np.array(offs, dtype=np.int64).reshape(-1, 3)
    n = grid.n
    h = grid.spacing
    nP = grid.size
    offsets = grid.transfer_offsets.astype(np.int64)
    nQ = offsets.shape[0]
    T0 = np.zeros((nP, nQ))
    separable = _use_separable(model, gas, quad)
    # separable entries are real for every offset; keep them real to halve memory traffic
    ctype = np.float64 if separable else np.complex128
    Td = np.zeros((len(offs), nP, nQ), dtype=ctype)
    lost = np.zeros(nP)
    Z0 = np.zeros(nP)
    Zd = np.zeros((len(offs), nP), dtype=ctype)

    x, sw = _nodes(gas, quad, model)
    if separable:
        pt = gas.distribution.p_T
        W = float(np.sum(np.outer(sw**2, sw**2) * gas.distribution.radial(x[:, None] ** 2 + x[None, :] ** 2)))
        qn = h * np.sqrt(np.sum(offsets.astype(float) ** 2, axis=1))
        f = model.amplitude_shell(np.zeros_like(qn), qn**2)
        A = pref**2 * np.abs(f) ** 2 * W / qn
        _tabulate_separable(n, h, offsets, dint, A, r, pt, T0, Td, lost)
        if quad.zero_cell:
            dirs, dw = sphere_directions(quad.zero_cell_order)
            f0 = model.amplitude_shell(np.zeros(1), np.zeros(1))[0]
            B = EPSTEIN_SC * h * h * pref**2 * abs(f0) ** 2 * W
            _zero_cell_separable(n, h, dint, dirs, dw, B, r, pt, Z0, Zd)
        if progress is not None:
            progress(nQ, nQ)
    else:
        H = np.empty((nP, x.size**2), dtype=np.complex128)
        basis = [plane_basis(o * h) for o in offsets]
        for q in range(nQ):
            qhat, e1, e2 = basis[q]
            qn = h * math.sqrt(float(np.sum(offsets[q] ** 2)))
            _fill_rows(H, n, h, qhat, qn, e1, e2, x, sw, r, pref, kind, par, tx, ty, mk, mp, mx, my)
            _scatter_generic(H, n, h, offsets[q], q, qn, dint, T0, Td, lost)
            if progress is not None:
                progress(q + 1, nQ)
        if quad.zero_cell:
            dirs, dw = sphere_directions(quad.zero_cell_order)
            for m in range(dirs.shape[0]):
                qhat, e1, e2 = plane_basis(dirs[m])
                _fill_rows(H, n, h, qhat, 0.0, e1, e2, x, sw, r, pref, kind, par, tx, ty, mk, mp, mx, my)
                _zero_cell_generic(H, n, dint, dw[m], Z0, Zd)
            Z0 *= EPSTEIN_SC * h * h
            Zd *= EPSTEIN_SC * h * h
        del H

    m_out = out_rates(grid, T0) + Z0
    meta = {
        "gas": {"mass": gas.mass, "number_density": gas.number_density, "temperature": gas.temperature,
                "distribution": type(gas.distribution).__name__},
        "tracer": {"mass": "inf" if math.isinf(tracer.mass) else tracer.mass},
        "model": {"type": type(model).__name__, **_model_params(model)},
        "grid": grid.spec(),
        "quadrature": {**quad.as_dict(), "order": quad.order(model)},
        "route": "separable" if separable else "quadrature",
    }
    tables = [KernelTable(grid, np.zeros(3, dtype=np.int64), T0, m_out, Z0, lost, dict(meta))]
    for d, o in enumerate(offs):
        tables.append(KernelTable(grid, o.astype(np.int64), Td[d], m_out, Zd[d], lost, dict(meta)))
    for t in tables:
        t.metadata["delta"] = t.delta.tolist()
        t.metadata["checksum"] = t.checksum()
    return tables


def _model_params(model) -> dict:
    out = {}
    for k, v in vars(model).items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def out_rates(grid: MomentumGrid, T0: np.ndarray) -> np.ndarray:
    """Column sums of the diagonal table: rate out of each node toward in-grid targets."""
    return _column_sums(grid.n, grid.spacing, grid.transfer_offsets.astype(np.int64), T0)


@numba.njit(cache=True)
def _column_sums(n, h, offsets, T0):
    out = np.zeros(n * n * n)
    for p_i in range(n):
        for p_j in range(n):
            for p_k in range(n):
                p = (p_i * n + p_j) * n + p_k
                for q in range(offsets.shape[0]):
                    si = p_i - offsets[q, 0]
                    sj = p_j - offsets[q, 1]
                    sk = p_k - offsets[q, 2]
                    if _in_grid(si, sj, sk, n):
                        out[(si * n + sj) * n + sk] += T0[p, q] * h * h * h
    return out


def out_rate_column(P, grid: MomentumGrid, gas: GasSpec, tracer: TracerSpec, model: ScatteringModel,
                    quad: QuadratureSpec = QuadratureSpec()) -> float:
    """The table's out-rate at one node, computed without building the table.

    Same terms as :func:`tabulate` (in-grid targets plus the zero cell); only
    the summation order differs.
    """
    idx = grid.node_index(as_momentum(P, "P"))
    S = grid.points[idx]
    r, pref, (kind, par, tx, ty), (mk, mp, mx, my) = _physics_args(gas, tracer, model)
    offsets = grid.transfer_offsets
    targets = grid.index3[idx] + offsets
    inside = np.all((targets >= 0) & (targets < grid.n), axis=1)
    Qs = offsets[inside] * grid.spacing
    qn = np.linalg.norm(Qs, axis=1)
    x, sw = _nodes(gas, quad, model)
    h = grid.spacing
    if _use_separable(model, gas, quad):
        pt = gas.distribution.p_T
        W = float(np.sum(np.outer(sw**2, sw**2) * gas.distribution.radial(x[:, None] ** 2 + x[None, :] ** 2)))
        f = model.amplitude_shell(np.zeros_like(qn), qn**2)
        c = 0.5 * (1.0 + r) * qn + r * (Qs @ S) / qn
        total = float(np.sum(pref**2 * np.abs(f) ** 2 * W / qn * np.exp(-c * c / pt**2))) * h**3
        if quad.zero_cell:
            dirs, dw = sphere_directions(quad.zero_cell_order)
            f0 = model.amplitude_shell(np.zeros(1), np.zeros(1))[0]
            c0 = r * (dirs @ S)
            total += EPSTEIN_SC * h * h * pref**2 * abs(f0) ** 2 * W * float(np.sum(dw * np.exp(-c0 * c0 / pt**2)))
        return total
    row = np.empty(x.size**2, dtype=np.complex128)
    total = 0.0
    for Q, q in zip(Qs, qn):
        qhat, e1, e2 = plane_basis(Q)
        _source_row(row, S, qhat, q, e1, e2, x, sw, r, pref, kind, par, tx, ty, mk, mp, mx, my)
        total += float(np.sum(np.abs(row) ** 2)) / q * h**3
    if quad.zero_cell:
        dirs, dw = sphere_directions(quad.zero_cell_order)
        z = 0.0
        for d, wd in zip(dirs, dw):
            qhat, e1, e2 = plane_basis(d)
            _source_row(row, S, qhat, 0.0, e1, e2, x, sw, r, pref, kind, par, tx, ty, mk, mp, mx, my)
            z += wd * float(np.sum(np.abs(row) ** 2))
        total += EPSTEIN_SC * h * h * z
    return total


def m_out_cl(P, grid: MomentumGrid, gas: GasSpec, tracer: TracerSpec, model: ScatteringModel,
             quad: QuadratureSpec = QuadratureSpec(), table: KernelTable | None = None) -> float:
    """Discrete out-rate at grid node ``P``: the column sum of the diagonal table.

    Includes the zero-cell self-weight.  With ``table`` (a diagonal table on
    ``grid``) the stored column sum used by the evolution is returned;
    otherwise the single column is computed directly.
    """
    if table is None:
        return out_rate_column(P, grid, gas, tracer, model, quad)
    idx = grid.node_index(as_momentum(P, "P"))
    table.check_compatible(grid, np.zeros(3, dtype=np.int64))
    return float(table.m_out[idx])


def invariant_scan(tables, tol_h: float = 1e-12, tol_cs: float = 1e-12) -> dict:
    """Full scan of Hermiticity and Cauchy-Schwarz over a set of tables.

    Hermiticity pairs the table of offset d at P with the table of -d at
    P - d (when both are present); Cauchy-Schwarz bounds |T_d(P; Q)| by
    sqrt(T_0(P; Q) T_0(P - d; Q)), zero-cell weights included.
    """
    by = {tuple(int(v) for v in t.delta): t for t in tables}
    if (0, 0, 0) not in by:
        raise ValueError("the scan needs the diagonal table")
    grid = by[(0, 0, 0)].grid
    T0 = by[(0, 0, 0)].values
    Z0 = by[(0, 0, 0)].zero_cell
    herm = 0.0
    cs = 0.0
    bad_h = 0
    bad_cs = 0
    checked = 0
    for key, t in by.items():
        if key == (0, 0, 0):
            continue
        d = np.array(key)
        p = np.flatnonzero(grid.sector_mask(d))
        pm = grid.flat_index(grid.index3[p] - d)
        for vals, diag in ((t.values[p], np.sqrt(T0[p] * T0[pm])), (t.zero_cell[p], np.sqrt(Z0[p] * Z0[pm]))):
            excess = np.abs(vals) - diag
            cs = max(cs, float(excess.max()))
            bad_cs += int(np.sum(excess > tol_cs))
        mirror = by.get(tuple(-d))
        if mirror is not None:
            for a, b in ((t.values[p], mirror.values[pm]), (t.zero_cell[p], mirror.zero_cell[pm])):
                diff = np.abs(b - np.conj(a))
                herm = max(herm, float(diff.max()))
                bad_h += int(np.sum(diff > tol_h * np.maximum(1.0, np.abs(a))))
        checked += t.values[p].size
    min_diag = float(min(T0.min(), Z0.min()))
    return {
        "hermiticity": herm,
        "cauchy_schwarz_excess": cs,
        "violations_hermiticity": bad_h,
        "violations_cauchy_schwarz": bad_cs,
        "min_diagonal_entry": min_diag,
        "entries_checked": checked,
        "ok": bad_h == 0 and bad_cs == 0 and min_diag >= 0.0,
    }
