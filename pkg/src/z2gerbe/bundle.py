"""Brillouin-zone grids, valence bundles and smooth periodic frames.

The frame construction is constructive: parallel transport of the valence
subspace along grid lines, followed by an explicit contraction of the loop
holonomies so that every seam closes.  Rank, gap and symmetry are checked on
the way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .models import BlochModel
from .numlin import (dagger, expm_antihermitian, haar_unitary, periodic_derivative,
                     polar_unitary, unitary_eig, unitary_log)

GAP_TOL_REL = 1e-6


class BundleError(ValueError):
    pass


class GapClosingError(BundleError):
    pass


class NotTrivializableError(BundleError):
    pass


@dataclass(frozen=True)
class BZGrid:
    """Regular grid ``k = 2 pi m / N`` on the Brillouin torus with even sizes."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) not in (2, 3):
            raise BundleError("grid must be 2d or 3d")
        if any(s <= 0 or s % 2 for s in sizes):
            raise BundleError("grid sizes must be positive and even so TRIM lie on the grid")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def square(cls, d: int, n: int) -> "BZGrid":
        return cls((n,) * d)

    @property
    def d(self) -> int:
        return len(self.sizes)

    @property
    def steps(self) -> np.ndarray:
        return 2 * np.pi / np.array(self.sizes)

    @cached_property
    def points(self) -> np.ndarray:
        axes = [2 * np.pi * np.arange(n) / n for n in self.sizes]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def reflect(self, arr: np.ndarray) -> np.ndarray:
        """Field value at ``-k`` for each grid point ``k`` (exact index reflection)."""
        out = arr
        for ax, n in enumerate(self.sizes):
            out = np.take(out, (-np.arange(n)) % n, axis=ax)
        return out

    def trim_indices(self) -> list[tuple[int, ...]]:
        import itertools
        return [tuple(c * (n // 2) for c, n in zip(combo, self.sizes))
                for combo in itertools.product((0, 1), repeat=self.d)]


@dataclass(frozen=True)
class ProjectorField:
    grid: BZGrid
    vectors: np.ndarray      # (*sizes, N, n) valence eigenvectors
    energies: np.ndarray     # (*sizes, N)
    fermi: float
    gap: float
    model: BlochModel | None = None
    trs_residual: float = float("nan")

    @property
    def rank(self) -> int:
        return self.vectors.shape[-1]

    @property
    def projectors(self) -> np.ndarray:
        return self.vectors @ dagger(self.vectors)


def valence_projectors(model: BlochModel, grid: BZGrid,
                       gap_tol: float | None = None) -> ProjectorField:
    """Spectral projectors below the Fermi level on every grid point."""
    if grid.d != model.d:
        raise BundleError("grid and model dimensions differ")
    h = model.evaluate(grid.points)
    e, v = np.linalg.eigh(h)
    below = (e < model.fermi).sum(axis=-1)
    n = int(below.flat[0])
    if np.any(below != n):
        raise GapClosingError("valence rank is not constant: the Fermi level crosses a band")
    bandwidth = float(e.max() - e.min()) or 1.0
    tol = GAP_TOL_REL * bandwidth if gap_tol is None else gap_tol
    dist = np.min(np.abs(e - model.fermi), axis=-1)
    worst = np.unravel_index(np.argmin(dist), dist.shape)
    if dist[worst] < tol:
        k = grid.points[worst]
        raise GapClosingError(
            f"metallic/gap-closing: spectrum within {dist[worst]:.2e} of the Fermi level "
            f"at k={np.round(k, 6).tolist()}")
    if n == 0 or n == model.size:
        raise BundleError("no valence or no conduction bands")
    gap = float(np.min(e[..., n] - e[..., n - 1]))
    pf = ProjectorField(grid, v[..., :n], e, model.fermi, gap, model)
    if model.theta is not None:
        p = pf.projectors
        res = float(np.max(np.linalg.norm(model.theta.conjugate(p) - grid.reflect(p),
                                          axis=(-2, -1))))
        pf = ProjectorField(grid, pf.vectors, e, model.fermi, gap, model, res)
    return pf


def slice_2d(pf: ProjectorField, axis: int, index: int) -> ProjectorField:
    """Restrict a 3d field to the 2d torus where coordinate ``axis`` is fixed."""
    if pf.grid.d != 3:
        raise BundleError("slicing needs a 3d field")
    sizes = tuple(s for a, s in enumerate(pf.grid.sizes) if a != axis)
    return ProjectorField(BZGrid(sizes), np.take(pf.vectors, index, axis=axis),
                          np.take(pf.energies, index, axis=axis), pf.fermi, pf.gap,
                          None, pf.trs_residual)


# --- Chern number and Wilson loops ----------------------------------------

def _link(v: np.ndarray, axis: int) -> np.ndarray:
    """U(1) link variables det(V(k)^dag V(k + e_axis))."""
    ov = dagger(v) @ np.roll(v, -1, axis=axis)
    det = np.linalg.det(ov)
    return det / np.abs(det)


def chern_number(pf: ProjectorField) -> tuple[int, float]:
    """Integer Chern number from plaquette Berry fluxes; returns (C, residual)."""
    if pf.grid.d != 2:
        raise BundleError("chern_number works on a 2d slice")
    u1, u2 = _link(pf.vectors, 0), _link(pf.vectors, 1)
    flux = np.angle(u1 * np.roll(u2, -1, axis=0) / np.roll(u1, -1, axis=1) / u2)
    total = flux.sum() / (2 * np.pi)
    c = int(np.rint(total))
    resid = float(abs(total - c))
    if resid > 1e-3 or np.max(np.abs(flux)) > 0.9 * np.pi:
        raise BundleError("plaquette fluxes under-resolved; refine the grid")
    return c, resid


def wilson_loop_spectrum(pf: ProjectorField) -> np.ndarray:
    """Wannier-centre phases in [0, 2pi) of the k1 Wilson loop at each k2."""
    v = pf.vectors
    ov = dagger(v) @ np.roll(v, -1, axis=0)
    n1 = v.shape[0]
    w = np.broadcast_to(np.eye(pf.rank, dtype=complex), ov.shape[1:]).copy()
    for j in range(n1):
        w = w @ polar_unitary(ov[j])
    return unitary_eig(w).eigenphases


def _arc_count(z0: float, z1: float, xs: np.ndarray) -> int:
    d = np.angle(np.exp(1j * (z1 - z0)))
    if d >= 0:
        rel = np.mod(xs - z0, 2 * np.pi)
        return int(np.sum((rel > 0) & (rel < d)))
    rel = np.mod(z0 - xs, 2 * np.pi)
    return int(np.sum((rel > 0) & (rel < -d)))


def _largest_gap_mid(x: np.ndarray) -> float:
    x = np.sort(x)
    gaps = np.diff(np.append(x, x[0] + 2 * np.pi))
    k = int(np.argmax(gaps))
    return float(np.mod(x[k] + gaps[k] / 2, 2 * np.pi))


def wilson_loop_z2(pf: ProjectorField, tol: float = 1e-6) -> int:
    """Z2 index from Wannier-centre flow over half the Brillouin zone.

    The reference is the midpoint of the largest gap between Wannier centres;
    the parity of the number of centres it jumps over between consecutive k2
    lines is the invariant.
    """
    if pf.grid.d != 2:
        raise BundleError("wilson_loop_z2 works on a 2d slice")
    wcc = wilson_loop_spectrum(pf)
    half = pf.grid.sizes[1] // 2
    ref = [_largest_gap_mid(wcc[l]) for l in range(half + 1)]
    total = 0
    for l in range(half):
        xs = wcc[l + 1]
        z0, z1 = ref[l], ref[l + 1]
        if np.min(np.abs(np.angle(np.exp(1j * (xs - z0))))) < tol:
            z0 = np.mod(z0 + 10 * tol, 2 * np.pi)
        total += _arc_count(z0, z1, xs)
    return total % 2


# --- smooth frames --------------------------------------------------------

@dataclass(frozen=True)
class FrameField:
    grid: BZGrid
    frames: np.ndarray            # (*sizes, N, n)
    smoothness: float             # max link difference ||e(k') - e(k)||
    seam_mismatch: float
    info: dict = field(default_factory=dict)


def _transport(e: np.ndarray, v_next: np.ndarray) -> np.ndarray:
    """Projector-based transport ``polar(P_next e)`` written in the eigenbasis."""
    return v_next @ polar_unitary(dagger(v_next) @ e)


def _transport_line(start: np.ndarray, vecs: np.ndarray, axis: int):
    """Transport ``start`` along ``axis`` of ``vecs``; returns frames and loop holonomy."""
    vecs = np.moveaxis(vecs, axis, 0)
    m = vecs.shape[0]
    out = np.empty_like(vecs)
    out[0] = start
    for j in range(1, m):
        out[j] = _transport(out[j - 1], vecs[j])
    close = _transport(out[-1], vecs[0])
    hol = dagger(start) @ close
    return np.moveaxis(out, 0, axis), hol


def _unwrap_field(ph: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Continuous lift of a periodic phase field on a 1d or 2d grid plus windings."""
    def unwrap_1d(x, axis):
        step = np.angle(np.exp(1j * np.diff(x, axis=axis)))
        first = np.take(x, [0], axis=axis)
        return np.concatenate([first, first + np.cumsum(step, axis=axis)], axis=axis)

    def winding(x, axis):
        last = np.take(x, [-1], axis=axis)
        first = np.take(x, [0], axis=axis)
        close = last + np.angle(np.exp(1j * (first - last)))
        return np.rint((close - first) / (2 * np.pi)).astype(int)

    if ph.ndim == 1:
        out = unwrap_1d(ph, 0)
        return out, [int(winding(out, 0)[0])]
    row = unwrap_1d(ph[:, 0], 0)
    rest = unwrap_1d(ph - ph[:, :1] + row[:, None], 1)
    w0 = np.unique(winding(rest, 0))
    w1 = np.unique(winding(rest, 1))
    if len(w0) > 1 or len(w1) > 1:
        raise BundleError("phase field is not resolved: inconsistent windings")
    return rest, [int(w0[0]), int(w1[0])]


def _choose_base(s: np.ndarray, rng: np.random.Generator, candidates: int = 400):
    """A fixed SU(n) element ``q`` keeping ``q^-1 s`` and ``q`` away from eigenvalue -1."""
    n = s.shape[-1]
    flat = s.reshape(-1, n, n)
    pool = [np.eye(n, dtype=complex)]
    pool += [flat[i] for i in rng.choice(len(flat), size=min(20, len(flat)), replace=False)]
    pool += [haar_unitary(n, rng, special=True) for _ in range(candidates)]
    sample = flat if len(flat) <= 2000 else flat[rng.choice(len(flat), 2000, replace=False)]

    def margin(q, pts):
        q_ph = unitary_eig(q).eigenphases
        ph = unitary_eig(dagger(q) @ pts).eigenphases
        return min(np.min(np.abs(np.angle(-np.exp(1j * q_ph)))),
                   np.min(np.abs(np.angle(-np.exp(1j * ph)))))

    best = max(pool, key=lambda q: margin(q, sample))
    return best, float(margin(best, flat))


def _contract(hol: np.ndarray, rng: np.random.Generator, min_margin: float = 0.05):
    """Smooth contraction ``H(s)`` of a periodic field of loop holonomies.

    ``hol = exp(i a) q exp(L)`` with a continuous determinant phase ``a``, a
    fixed ``q`` and the principal log ``L``; then
    ``H(s) = exp(i s a) exp(s log q) exp(s L)``.
    """
    n = hol.shape[-1]
    det = np.linalg.det(hol)
    ph, wind = _unwrap_field(np.angle(det))
    if any(wind):
        raise NotTrivializableError(
            f"valence bundle is not trivializable: Chern numbers {wind} along the "
            "transport seams")
    a = ph / n
    s = hol * np.exp(-1j * a)[..., None, None]
    q, margin = _choose_base(s, rng)
    if margin < min_margin:
        raise BundleError(
            f"winding removal failed: holonomy field too close to the cut (margin {margin:.3g})")
    logq = unitary_log(q)
    logs = unitary_log(dagger(q) @ s)

    def h_of(t: float) -> np.ndarray:
        return (np.exp(1j * t * a)[..., None, None] * expm_antihermitian(t * logq)
                @ expm_antihermitian(t * logs))

    return h_of, {"base_margin": float(margin)}


def _ease(s: float) -> float:
    """Reparametrization with vanishing first and second derivatives at 0 and 1."""
    return s - np.sin(2 * np.pi * s) / (2 * np.pi)


def _link_metric(frames: np.ndarray, d: int) -> float:
    return float(max(np.max(np.linalg.norm(np.roll(frames, -1, axis=a) - frames,
                                           axis=(-2, -1))) for a in range(d)))


def smooth_frame(pf: ProjectorField, seed: int = 0) -> FrameField:
    """Smooth periodic orthonormal frame of the valence bundle.

    Steps: transport the k=0 eigenframe along k1 and spread the seam holonomy
    by its logarithm; transport each column along k2 and contract the family of
    column holonomies; in 3d, repeat the last step along k3 over the k3=0 plane.
    """
    rng = np.random.default_rng(seed)
    d = pf.grid.d
    if pf.rank % 2:
        raise NotTrivializableError("odd valence rank cannot carry a time-reversal frame")
    v = pf.vectors
    n1 = pf.grid.sizes[0]
    info = {}
    base = v[(0,) * d]
    # k1 line through the origin
    line, hol = _transport_line(base, v[(slice(None),) + (0,) * (d - 1)], 0)
    log_h = unitary_log(hol)
    ramp = np.arange(n1) / n1
    line = line @ expm_antihermitian(-ramp[:, None, None] * log_h)
    # k2 columns
    sl2 = (slice(None), slice(None)) + (0,) * (d - 2)
    plane, hol2 = _transport_line(line, v[sl2], 1)
    h2, meta = _contract(hol2, rng)
    info["k2"] = meta
    n2 = pf.grid.sizes[1]
    for l in range(n2):
        plane[:, l] = plane[:, l] @ dagger(h2(_ease(l / n2)))
    frames = plane
    if d == 3:
        n3 = pf.grid.sizes[2]
        vol, hol3 = _transport_line(plane, v, 2)
        h3, meta = _contract(hol3, rng)
        info["k3"] = meta
        for l in range(n3):
            vol[:, :, l] = vol[:, :, l] @ dagger(h3(_ease(l / n3)))
        frames = vol
    resid = float(np.max(np.linalg.norm(frames - v @ (dagger(v) @ frames), axis=(-2, -1))))
    info["range_residual"] = resid
    seam = _link_metric(frames, d)
    return FrameField(pf.grid, frames, seam, _seam_mismatch(frames, d), info)


def _seam_mismatch(frames: np.ndarray, d: int) -> float:
    """Jump across each seam compared with the neighbouring interior links."""
    worst = 0.0
    for a in range(d):
        seam = np.linalg.norm(np.take(frames, 0, axis=a) - np.take(frames, -1, axis=a),
                              axis=(-2, -1)).max()
        inner = np.linalg.norm(np.take(frames, -1, axis=a) - np.take(frames, -2, axis=a),
                               axis=(-2, -1)).max()
        worst = max(worst, float(abs(seam - inner)))
    return worst


def constant_frame(grid: BZGrid, e0: np.ndarray) -> FrameField:
    frames = np.broadcast_to(e0, grid.sizes + e0.shape).copy()
    return FrameField(grid, frames, 0.0, 0.0, {})


# --- Berry connection -----------------------------------------------------

@dataclass(frozen=True)
class ConnectionField:
    grid: BZGrid
    components: np.ndarray   # (*sizes, d, n, n), A_mu per unit k
    hermiticity_deviation: float


def berry_connection(frame: FrameField, max_link: float = 1.5,
                     method: str = "spectral") -> ConnectionField:
    """``A_mu = e^dag d_mu e``, projected anti-Hermitian.

    Derivatives are spectral by default; ``method="centred"`` gives the
    second-order stencil.
    """
    if frame.smoothness > max_link:
        raise BundleError(f"frame too rough for a connection (link metric {frame.smoothness:.3g})")
    e = frame.frames
    comps = []
    dev = 0.0
    for a, h in enumerate(frame.grid.steps):
        amu = dagger(e) @ periodic_derivative(e, a, h, method)
        dev = max(dev, float(np.max(np.linalg.norm(amu + dagger(amu), axis=(-2, -1)))))
        comps.append(0.5 * (amu - dagger(amu)))
    return ConnectionField(frame.grid, np.stack(comps, axis=frame.grid.d), dev)
