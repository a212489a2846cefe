"""Sewing matrices of a time-reversal-symmetric frame and the FKM invariant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle import BZGrid, FrameField
from .models import TimeReversalOperator
from .numlin import dagger, pfaffian

FACTOR_TOL = 1e-6


class SewingError(ValueError):
    pass


@dataclass(frozen=True)
class SewingField:
    grid: BZGrid
    w: np.ndarray                 # (*sizes, n, n)
    antisymmetry_residual: float
    unitarity_residual: float


@dataclass(frozen=True)
class DetBranch:
    """Continuous lift ``phase(k)`` of ``arg det w(k)`` on the grid."""

    phase: np.ndarray
    base_phase: float

    def sqrt_det(self) -> np.ndarray:
        return np.exp(0.5j * self.phase)


@dataclass(frozen=True)
class FKMCertificate:
    trims: list[tuple[float, ...]]
    pfaffians: list[complex]
    sqrt_dets: list[complex]
    factors: list[int]
    factor_residual: float
    invariant: int           # 0 trivial, 1 topological

    @property
    def sign(self) -> int:
        return -1 if self.invariant else 1


def sewing_matrix(frame: FrameField, theta: TimeReversalOperator) -> SewingField:
    """``w(k) = e(-k)^dag u_theta conj(e(k))``; antisymmetric under ``k -> -k``."""
    e = frame.frames
    w = dagger(frame.grid.reflect(e)) @ theta.u_theta @ np.conj(e)
    n = w.shape[-1]
    anti = float(np.max(np.linalg.norm(frame.grid.reflect(w) + np.swapaxes(w, -1, -2),
                                       axis=(-2, -1))))
    unit = float(np.max(np.linalg.norm(dagger(w) @ w - np.eye(n), axis=(-2, -1))))
    return SewingField(frame.grid, w, anti, unit)


def _phase_lift(ph: np.ndarray) -> np.ndarray:
    """Row-major unwrap of a periodic phase field; raises on nonzero winding."""
    out = ph.copy()
    for ax in range(ph.ndim):
        # lines along ax start on the face lifted by the previous axes
        step = np.angle(np.exp(1j * np.diff(out, axis=ax)))
        first = np.take(out, [0], axis=ax)
        out = np.concatenate([first, first + np.cumsum(step, axis=ax)], axis=ax)
    for ax in range(ph.ndim):
        last = np.take(out, [-1], axis=ax)
        first = np.take(out, [0], axis=ax)
        jump = last + np.angle(np.exp(1j * (first - last))) - first
        if np.max(np.abs(jump)) > np.pi:
            raise SewingError(
                f"det w winds along axis {ax}: frame is not smooth or periodic enough")
    return out


def det_branch(field: SewingField, flip: bool = False) -> DetBranch:
    """Continuous ``arg det w`` with the value at ``k=0`` in ``(-pi, pi]``.

    ``flip`` shifts the whole branch by ``2 pi``, which negates every
    ``sqrt det w``.
    """
    det = np.linalg.det(field.w)
    lifted = _phase_lift(np.angle(det))
    base = np.angle(np.exp(1j * lifted.flat[0]))
    lifted = lifted - lifted.flat[0] + base
    if flip:
        lifted = lifted + 2 * np.pi
        base = base + 2 * np.pi
    return DetBranch(lifted, float(base))


def reduce_su(field: SewingField, branch: DetBranch) -> np.ndarray:
    """``w~ = exp(-i phase / n) w`` with unit determinant everywhere."""
    n = field.w.shape[-1]
    return field.w * np.exp(-1j * branch.phase / n)[..., None, None]


def _certificate(field: SewingField, branch: DetBranch, trims) -> FKMCertificate:
    pfs, sq, facs, worst = [], [], [], 0.0
    steps = field.grid.steps
    for idx in trims:
        pf = pfaffian(field.w[idx], tol=1e-8)
        s = complex(np.exp(0.5j * branch.phase[idx]))
        f = s / pf
        dev = min(abs(f - 1), abs(f + 1))
        worst = max(worst, dev)
        if dev > FACTOR_TOL:
            raise SewingError(
                f"TRIM factor {f:.6g} at k={np.round(np.array(idx) * steps, 6).tolist()} "
                "is not +-1: branch or Pfaffian inconsistent")
        pfs.append(pf)
        sq.append(s)
        facs.append(1 if f.real > 0 else -1)
    invariant = 0 if np.prod(facs) > 0 else 1
    pts = [tuple(float(i * h) for i, h in zip(idx, steps)) for idx in trims]
    return FKMCertificate(pts, pfs, sq, facs, worst, invariant)


def fkm_2d(field: SewingField, branch: DetBranch | None = None) -> FKMCertificate:
    """Product over the four TRIM of ``sqrt det w / pf w``."""
    if field.grid.d != 2:
        raise SewingError("fkm_2d needs a 2d field")
    branch = branch or det_branch(field)
    return _certificate(field, branch, field.grid.trim_indices())


def fkm_3d_strong(field: SewingField, branch: DetBranch | None = None) -> FKMCertificate:
    """Strong index: product over all eight TRIM of the 3d torus."""
    if field.grid.d != 3:
        raise SewingError("fkm_3d_strong needs a 3d field")
    branch = branch or det_branch(field)
    return _certificate(field, branch, field.grid.trim_indices())


def fkm_3d_weak(field: SewingField, branch: DetBranch | None = None) -> tuple[int, int, int]:
    """Weak indices from the planes ``k_a = pi``."""
    branch = branch or det_branch(field)
    cert = _certificate(field, branch, field.grid.trim_indices())
    half = [n // 2 for n in field.grid.sizes]
    out = []
    for a in range(3):
        prod = 1
        for idx, f in zip(field.grid.trim_indices(), cert.factors):
            if idx[a] == half[a]:
                prod *= f
        out.append(0 if prod > 0 else 1)
    return tuple(out)


def pf_tilde_product(field: SewingField, branch: DetBranch | None = None) -> complex:
    """Product of ``pf w~`` over the TRIM of the grid."""
    branch = branch or det_branch(field)
    wt = reduce_su(field, branch)
    out = 1.0 + 0j
    for idx in field.grid.trim_indices():
        out *= pfaffian(wt[idx], tol=1e-8)
    return out


def gauge_change(frame: FrameField, u: np.ndarray) -> FrameField:
    """Frame ``e(k) u(k)``; the sewing matrix becomes ``u(-k)^dag w(k) conj(u(k))``."""
    return FrameField(frame.grid, frame.frames @ u, float("nan"), float("nan"), {})


def transformed_sewing(field: SewingField, u: np.ndarray) -> np.ndarray:
    return dagger(field.grid.reflect(u)) @ field.w @ np.conj(u)
