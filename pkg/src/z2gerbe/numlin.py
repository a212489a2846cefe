"""Dense complex linear algebra used throughout the package.

Every routine accepts either a single matrix or a stack ``(..., n, n)`` where
that makes sense, and never mutates its input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HERM_TOL = 1e-10
UNITARY_TOL = 1e-10
CLUSTER_TOL = 1e-9


class LinalgError(ValueError):
    """Raised when an input violates the structural precondition of a kernel."""


@dataclass(frozen=True)
class HermitianSpectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass(frozen=True)
class UnitaryEigendata:
    """Eigenphases in ``[0, 2*pi)`` (ascending) and orthonormal eigenvectors.

    ``clusters`` lists index groups of phases closer than the cluster tolerance
    (wrapping through ``2*pi``); only single matrices carry it.
    """

    eigenphases: np.ndarray
    eigenvectors: np.ndarray
    clusters: tuple[tuple[int, ...], ...] = ()


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def _norm(a: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a, axis=(-2, -1))


def eigh(h: np.ndarray, tol: float = HERM_TOL) -> HermitianSpectrum:
    h = np.asarray(h, dtype=complex)
    scale = np.maximum(_norm(h), 1.0)
    if np.any(_norm(h - dagger(h)) > tol * scale):
        raise LinalgError("matrix is not Hermitian within tolerance")
    vals, vecs = np.linalg.eigh(0.5 * (h + dagger(h)))
    return HermitianSpectrum(vals, vecs)


def pfaffian(a: np.ndarray, tol: float = 1e-10) -> complex:
    """Pfaffian of an antisymmetric matrix.

    Skew-symmetric Parlett-Reid reduction with partial pivoting; each row and
    column swap flips the sign.
    """
    a = np.array(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinalgError("pfaffian needs a square matrix")
    n = a.shape[0]
    if n % 2:
        raise LinalgError("pfaffian of an odd-dimensional matrix")
    if np.linalg.norm(a + a.T) > tol * max(np.linalg.norm(a), 1.0):
        raise LinalgError("matrix is not antisymmetric within tolerance")
    a = 0.5 * (a - a.T)
    pf = 1.0 + 0.0j
    for k in range(0, n - 1, 2):
        kp = k + 1 + int(np.argmax(np.abs(a[k + 1:, k])))
        if kp != k + 1:
            a[[k + 1, kp], :] = a[[kp, k + 1], :]
            a[:, [k + 1, kp]] = a[:, [kp, k + 1]]
            pf = -pf
        piv = a[k, k + 1]
        if piv == 0:
            return 0.0j
        pf *= piv
        if k + 2 < n:
            tau = a[k, k + 2:] / piv
            col = a[k + 2:, k + 1]
            a[k + 2:, k + 2:] += np.outer(tau, col) - np.outer(col, tau)
    return complex(pf)


def unwrap_phase(z, margin: float = 1e-6) -> np.ndarray:
    """Continuous phase of a sequence of nonzero complex numbers.

    Raises if a consecutive step is too close to a half turn to be resolved.
    """
    z = np.asarray(z, dtype=complex)
    if np.any(np.abs(z) == 0):
        raise LinalgError("cannot take the phase of zero")
    steps = np.angle(z[1:] / z[:-1])
    if steps.size and np.max(np.abs(steps)) >= np.pi - margin:
        raise LinalgError("phase step of nearly pi: path is under-resolved")
    out = np.empty(z.shape, dtype=float)
    if z.size:
        out[0] = np.angle(z[0])
        out[1:] = out[0] + np.cumsum(steps)
    return out


def _cluster_indices(phases: np.ndarray, tol: float) -> tuple[tuple[int, ...], ...]:
    n = len(phases)
    if n == 0:
        return ()
    # phases ascending in [0, 2pi); neighbour gaps including the wrap gap
    gaps = np.diff(np.append(phases, phases[0] + 2 * np.pi))
    breaks = [i for i in range(n) if gaps[i] >= tol]
    if not breaks:
        return (tuple(range(n)),)
    start = (breaks[-1] + 1) % n
    clusters, cur = [], []
    for s in range(n):
        i = (start + s) % n
        cur.append(i)
        if gaps[i] >= tol:
            clusters.append(tuple(cur))
            cur = []
    return tuple(clusters)


def unitary_eig(g: np.ndarray, tol: float = UNITARY_TOL,
                cluster_tol: float = CLUSTER_TOL) -> UnitaryEigendata:
    """Eigendecomposition of a unitary matrix (or stack) with orthonormal vectors.

    The vectors come from a Hermitian Cayley transform rotated away from the
    spectrum, so degenerate clusters still receive orthonormal bases.
    """
    g = np.asarray(g, dtype=complex)
    n = g.shape[-1]
    eye = np.eye(n)
    if np.any(_norm(dagger(g) @ g - eye) > tol * np.sqrt(n)):
        raise LinalgError("matrix is not unitary within tolerance")
    ev = np.linalg.eigvals(g)
    ph = np.sort(np.mod(np.angle(ev), 2 * np.pi), axis=-1)
    gaps = np.diff(np.concatenate([ph, ph[..., :1] + 2 * np.pi], axis=-1), axis=-1)
    k = np.argmax(gaps, axis=-1)
    mid = np.take_along_axis(ph, k[..., None], -1)[..., 0] \
        + 0.5 * np.take_along_axis(gaps, k[..., None], -1)[..., 0]
    # rotate so the largest spectral gap sits at -1, where the Cayley map is singular
    rot = np.exp(-1j * (mid - np.pi))[..., None, None]
    gr = rot * g
    c = -1j * (gr - eye) @ np.linalg.inv(gr + eye)
    c = 0.5 * (c + dagger(c))
    vals, vecs = np.linalg.eigh(c)
    phases = np.mod(2 * np.arctan(vals) + (mid - np.pi)[..., None], 2 * np.pi)
    order = np.argsort(phases, axis=-1)
    phases = np.take_along_axis(phases, order, -1)
    vecs = np.take_along_axis(vecs, order[..., None, :], -1)
    clusters = _cluster_indices(phases, cluster_tol) if g.ndim == 2 else ()
    return UnitaryEigendata(phases, vecs, clusters)


def unitary_log(g: np.ndarray, tol: float = UNITARY_TOL) -> np.ndarray:
    """Principal logarithm (eigenphases in ``(-pi, pi]``) of unitary matrices."""
    data = unitary_eig(g, tol)
    ph = np.angle(np.exp(1j * data.eigenphases))
    v = data.eigenvectors
    return (v * (1j * ph)[..., None, :]) @ dagger(v)


def expm_antihermitian(x: np.ndarray) -> np.ndarray:
    """Exponential of anti-Hermitian matrices through a Hermitian eigensolve."""
    x = np.asarray(x, dtype=complex)
    k = -1j * x
    vals, vecs = np.linalg.eigh(0.5 * (k + dagger(k)))
    return (vecs * np.exp(1j * vals)[..., None, :]) @ dagger(vecs)


def polar_unitary(a: np.ndarray) -> np.ndarray:
    """Unitary (or isometric) factor of the polar decomposition of ``a``."""
    u, _, vh = np.linalg.svd(a, full_matrices=False)
    return u @ vh


def haar_unitary(n: int, rng: np.random.Generator, special: bool = False) -> np.ndarray:
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    q = q * (np.diag(r) / np.abs(np.diag(r)))
    if special:
        q = q / np.linalg.det(q) ** (1.0 / n)
    return q


def random_antihermitian(n: int, rng: np.random.Generator, scale: float = 1.0,
                         traceless: bool = False) -> np.ndarray:
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    x = scale * 0.5 * (z - dagger(z))
    if traceless:
        x = x - np.trace(x) / n * np.eye(n)
    return x


def periodic_derivative(f: np.ndarray, axis: int, step: float, method: str = "spectral") -> np.ndarray:
    """Derivative of a field sampled on a periodic grid along ``axis``.

    ``spectral`` differentiates the trigonometric interpolant (Nyquist mode
    dropped); ``centred`` and ``centred4`` are the 2nd and 4th order stencils.
    """
    if method == "centred":
        return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2 * step)
    if method == "centred4":
        return (8 * (np.roll(f, -1, axis) - np.roll(f, 1, axis))
                - (np.roll(f, -2, axis) - np.roll(f, 2, axis))) / (12 * step)
    if method != "spectral":
        raise ValueError(f"unknown derivative method {method!r}")
    n = f.shape[axis]
    k = np.fft.fftfreq(n, 1.0 / n)
    if n % 2 == 0:
        k[n // 2] = 0
    shape = [1] * f.ndim
    shape[axis] = n
    scale = 2 * np.pi / (n * step)
    out = np.fft.ifft(np.fft.fft(f, axis=axis) * (1j * scale * k).reshape(shape), axis=axis)
    return out if np.iscomplexobj(f) else out.real
