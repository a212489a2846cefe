"""Differential-form computations: H pullbacks, WZ extensions, Chern-Simons actions.

All actions are reported modulo 2 pi together with an error estimate; raw
values of a WZ or CS action carry no meaning beyond that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import BZGrid, ConnectionField, berry_connection, smooth_frame, valence_projectors
from .models import BlochModel
from .numlin import dagger, periodic_derivative
from .sewing import SewingField, det_branch, fkm_3d_strong, sewing_matrix

TWO_PI = 2 * np.pi


def wrap(x: float) -> float:
    """Representative in (-pi, pi]."""
    return float(np.angle(np.exp(1j * x)))


def h_density(n1: np.ndarray, n2: np.ndarray, n3: np.ndarray) -> np.ndarray:
    """``H(v1, v2, v3) = (1/4 pi) tr(N1 [N2, N3])`` for left-trivialized tangents."""
    val = np.trace(n1 @ (n2 @ n3 - n3 @ n2), axis1=-2, axis2=-1)
    return val.real / (4 * np.pi)


def left_derivatives(field: np.ndarray, steps, axes=None,
                     method: str = "spectral") -> list[np.ndarray]:
    """``g^-1 d_mu g`` on a periodic grid, projected anti-Hermitian."""
    d = field.ndim - 2
    axes = range(d) if axes is None else axes
    ginv = dagger(field)
    out = []
    for ax in axes:
        m = ginv @ periodic_derivative(field, ax, steps[ax], method)
        out.append(0.5 * (m - dagger(m)))
    return out


def h_pullback_density(field: np.ndarray, steps, method: str = "spectral") -> np.ndarray:
    """Pointwise ``g*H`` on a periodic 3d grid (coefficient of dk1 dk2 dk3)."""
    if field.ndim != 5:
        raise ValueError("h_pullback_density needs a 3d field of matrices")
    m1, m2, m3 = left_derivatives(field, steps, method=method)
    return h_density(m1, m2, m3)


def h_pullback(field: np.ndarray, steps=None, method: str = "spectral") -> float:
    """``int_{T^3} g*H`` for a periodic field sampled on a regular grid."""
    steps = _steps(field, steps)
    return float(np.sum(h_pullback_density(field, steps, method)) * np.prod(steps))


def _steps(field, steps):
    if steps is None:
        return TWO_PI / np.array(field.shape[:-2])
    return np.asarray(steps, float)


def h_closed_form(x1: np.ndarray, x2: np.ndarray, x3: np.ndarray) -> float:
    """``H`` at ``g = exp(sum x_mu X_mu)`` at the origin."""
    return float(h_density(x1, x2, x3))


# --- WZ extension oracle --------------------------------------------------

@dataclass(frozen=True)
class ActionResult:
    value: float          # in (-pi, pi]
    raw: float
    error: float
    amplitude: complex


def _extension_action(y: np.ndarray, t_nodes: int) -> float:
    n1, n2, n, _ = y.shape
    vals, vecs = np.linalg.eigh(-1j * y)          # y = V diag(i vals) V^dag
    dy = [periodic_derivative(y, a, TWO_PI / y.shape[a]) for a in (0, 1)]
    d = [dagger(vecs) @ x @ vecs for x in dy]
    lam = 1j * vals
    diff = lam[..., None, :] - lam[..., :, None]   # y_b - y_a
    nodes, weights = np.polynomial.legendre.leggauss(t_nodes)
    ts, ws = 0.5 * (nodes + 1), 0.5 * weights
    total = 0.0
    small = np.abs(diff) < 1e-12
    safe = np.where(small, 1.0, diff)
    for t, wt in zip(ts, ws):
        kern = np.where(small, t, (np.exp(t * diff) - 1) / safe)
        a1, a2 = d[0] * kern, d[1] * kern
        comm = a1 @ a2 - a2 @ a1
        dens = np.einsum("...a,...aa->...", lam, comm).real / (4 * np.pi)
        total += wt * dens.sum()
    return float(total * (TWO_PI / n1) * (TWO_PI / n2))


def wz_extension_oracle(y: np.ndarray, t_nodes: int = 24) -> ActionResult:
    """WZ action of ``w(k) = exp(Y(k)) c`` from the extension ``W(t, k) = exp(t Y(k)) c``.

    ``Y`` is a smooth periodic traceless anti-Hermitian field on a 2d grid and
    ``c`` any constant, which does not change ``W*H``.  The integral over
    ``[0,1] x T^2`` uses Gauss-Legendre nodes in ``t`` and the periodic
    trapezoid rule in ``k``, orientation ``dt dk1 dk2``.  The error estimate
    compares with half the nodes in ``t`` and every other grid point in ``k``.
    """
    s = _extension_action(y, t_nodes)
    coarse = _extension_action(y[::2, ::2], t_nodes // 2)
    err = abs(wrap(s - coarse))
    return ActionResult(wrap(s), s, err, complex(np.exp(1j * s)))


def exponential_family(coeffs, generators) -> np.ndarray:
    """``Y(k) = sum_a f_a(k) X_a`` from sampled coefficient fields and fixed generators."""
    return sum(np.asarray(f)[..., None, None] * x for f, x in zip(coeffs, generators))


def expm_field(y: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(-1j * y)
    return (vecs * np.exp(1j * vals)[..., None, :]) @ dagger(vecs)


# --- Chern-Simons ---------------------------------------------------------

def cs_density(a: np.ndarray, steps, method: str = "spectral") -> np.ndarray:
    """``(1/4 pi) eps^{mu nu rho} tr(A_mu d_nu A_rho + (2/3) A_mu A_nu A_rho)``."""
    comps = [a[..., mu, :, :] for mu in range(3)]
    da = [[periodic_derivative(comps[r], nu, steps[nu], method) for r in range(3)]
          for nu in range(3)]
    total = 0.0
    for (mu, nu, rho), sgn in _EPS:
        term = comps[mu] @ da[nu][rho] + (2.0 / 3.0) * comps[mu] @ comps[nu] @ comps[rho]
        total = total + sgn * np.trace(term, axis1=-2, axis2=-1)
    return total.real / (4 * np.pi)


_EPS = [((0, 1, 2), 1), ((1, 2, 0), 1), ((2, 0, 1), 1),
        ((0, 2, 1), -1), ((2, 1, 0), -1), ((1, 0, 2), -1)]


def cs_action(conn: ConnectionField, method: str = "spectral") -> ActionResult:
    """``S_CS(A)`` on the 3-torus, mod 2 pi.

    The error estimate compares against the same cubature on the even
    sub-lattice (doubled spacing).
    """
    if conn.grid.d != 3:
        raise ValueError("cs_action needs a 3d connection")
    steps = conn.grid.steps
    raw = float(np.sum(cs_density(conn.components, steps, method)) * np.prod(steps))
    coarse_a = conn.components[::2, ::2, ::2]
    coarse = float(np.sum(cs_density(coarse_a, 2 * steps, method)) * np.prod(2 * steps))
    return ActionResult(wrap(raw), raw, abs(wrap(raw - coarse)), complex(np.exp(1j * raw)))


def gauge_transform(conn: ConnectionField, u: np.ndarray,
                    method: str = "spectral") -> ConnectionField:
    """Connection of the frame ``e u``: ``u^-1 A u + u^-1 d u``."""
    steps = conn.grid.steps
    du = left_derivatives(u, steps, method=method)
    comps = [dagger(u) @ conn.components[..., mu, :, :] @ u + du[mu] for mu in range(3)]
    return ConnectionField(conn.grid, np.stack(comps, axis=3), conn.hermiticity_deviation)


@dataclass(frozen=True)
class HalfTorusResult:
    value: float
    raw: float
    full_integral: float
    half_integral: float
    factor_two_residual: float
    amplitude: complex


def cs_via_half_torus(sf: SewingField) -> HalfTorusResult:
    """``-int_{k1 in [0, pi]} w*H`` with half weight on the planes ``k1 = 0, pi``."""
    if sf.grid.d != 3:
        raise ValueError("needs a 3d sewing field")
    steps = sf.grid.steps
    dens = h_pullback_density(sf.w, steps)
    vol = np.prod(steps)
    full = float(dens.sum() * vol)
    half_n = sf.grid.sizes[0] // 2
    wts = np.ones(half_n + 1)
    wts[0] = wts[-1] = 0.5
    half = float(np.tensordot(wts, dens[: half_n + 1].sum(axis=(1, 2)), axes=1) * vol)
    resid = abs(full - 2 * half) / max(abs(full), 1.0)
    return HalfTorusResult(wrap(-half), -half, full, half, resid, complex(np.exp(-1j * half)))


# --- Polyakov-Wiegmann ----------------------------------------------------

def polyakov_wiegmann_check(w1, w2, center, h: float, q: int = 6, eps: float = 1e-5) -> float:
    """Residual of ``(W1 W2)*H = W1*H + W2*H + d beta`` integrated over a cube.

    ``beta = (1/4 pi) tr(W1^-1 dW1 ^ W2 dW2^-1)``; the exact term is integrated
    over the cube boundary.  ``w1`` and ``w2`` map points of R^3 to unitary matrices.
    """
    center = np.asarray(center, float)
    nodes, weights = np.polynomial.legendre.leggauss(q)
    off, wq = 0.5 * h * nodes, 0.5 * h * weights

    def lderiv(f, x):
        g = f(x)
        out = []
        for mu in range(3):
            e = np.zeros(3)
            e[mu] = eps
            out.append(dagger(g) @ (f(x + e) - f(x - e)) / (2 * eps))
        return out

    def rderiv_inv(f, x):
        # W dW^-1 = -dW W^-1
        g = f(x)
        out = []
        for mu in range(3):
            e = np.zeros(3)
            e[mu] = eps
            out.append(-(f(x + e) - f(x - e)) / (2 * eps) @ dagger(g))
        return out

    prod = lambda x: w1(x) @ w2(x)
    vol = 0.0
    for a, wa in zip(off, wq):
        for b, wb in zip(off, wq):
            for c, wc in zip(off, wq):
                x = center + np.array([a, b, c])
                dens = [h_density(*lderiv(f, x)) for f in (prod, w1, w2)]
                vol += wa * wb * wc * (dens[0] - dens[1] - dens[2])
    bnd = 0.0
    for ax in range(3):
        o = [m for m in range(3) if m != ax]
        par = np.linalg.det(np.eye(3)[[ax, o[0], o[1]]])
        for side in (-1, 1):
            for s, ws in zip(off, wq):
                for t, wt in zip(off, wq):
                    x = center.copy()
                    x[ax] += side * 0.5 * h
                    x[o[0]] += s
                    x[o[1]] += t
                    l1 = lderiv(w1, x)
                    r2 = rderiv_inv(w2, x)
                    beta = (np.trace(l1[o[0]] @ r2[o[1]]) - np.trace(l1[o[1]] @ r2[o[0]])).real
                    bnd += side * par * ws * wt * beta / (4 * np.pi)
    return float(abs(vol - bnd))


# --- CS amplitude against the strong index --------------------------------

@dataclass(frozen=True)
class CSReport:
    grid: tuple[int, ...]
    strong_index: int
    slice_index: int | None
    cs: ActionResult
    half_torus: HalfTorusResult
    fkm_amplitude: int
    phase_distance_cs: float
    phase_distance_half: float
    cs_half_discrepancy: float
    extras: dict = field(default_factory=dict)


def phase_distance(a: complex, b: complex) -> float:
    return float(abs(np.angle(a / b)))


def prop2_check(model: BlochModel, n: int = 24, seed: int = 0, with_slices: bool = True) -> CSReport:
    """Strong FKM sign against ``exp(i S_CS)`` from the Berry connection and from the sewing field."""
    from .bundle import slice_2d, wilson_loop_z2
    grid = BZGrid.square(3, n)
    pf = valence_projectors(model, grid)
    frame = smooth_frame(pf, seed=seed)
    conn = berry_connection(frame)
    cs = cs_action(conn)
    sf = sewing_matrix(frame, model.theta)
    cert = fkm_3d_strong(sf, det_branch(sf))
    half = cs_via_half_torus(sf)
    slice_idx = None
    if with_slices:
        slice_idx = (wilson_loop_z2(slice_2d(pf, 2, 0)) + wilson_loop_z2(slice_2d(pf, 2, n // 2))) % 2
    sign = cert.sign
    return CSReport(grid.sizes, cert.invariant, slice_idx, cs, half, sign,
                    phase_distance(cs.amplitude, sign), phase_distance(half.amplitude, sign),
                    phase_distance(cs.amplitude, half.amplitude),
                    {"frame_smoothness": frame.smoothness, "connection_hermiticity": conn.hermiticity_deviation})
