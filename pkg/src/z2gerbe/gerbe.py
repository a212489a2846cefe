"""The basic gerbe over SU(n) and the surface holonomy of maps from the torus.

Group elements are written ``g = gamma exp(2 pi i diag(psi)) gamma^-1`` with
``psi`` sorted descending, ``sum(psi) = 0`` and ``psi_1 - psi_n <= 1``.  The
alcove coordinates are ``tau_a = psi_a - psi_{a+1}`` and
``tau_0 = 1 - (psi_1 - psi_n)``; ``g`` lies in the open set ``O_i`` when
``tau_i > 0``.

Line-bundle data are carried by eigenvector frames.  The traceless weight
difference ``lambda_j - lambda_i`` equals, up to a multiple of the identity,
plus or minus the projector onto sorted positions ``min(i,j)+1 .. max(i,j)``,
so connection forms, transports and characters reduce to determinants of the
corresponding block of a frame overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numlin import dagger, expm_antihermitian, pfaffian, polar_unitary, unitary_eig, unitary_log


class GerbeError(ValueError):
    pass


class MarginError(GerbeError):
    pass


# --- weights --------------------------------------------------------------

@dataclass(frozen=True)
class Weight:
    index: int
    matrix: np.ndarray


def weight(n: int, i: int) -> np.ndarray:
    if n < 2:
        raise GerbeError("weights need n >= 2")
    d = np.concatenate([np.full(i, (n - i) / n), np.full(n - i, -i / n)])
    return np.diag(d)


def weights(n: int) -> list[Weight]:
    return [Weight(i, weight(n, i)) for i in range(n)]


def weight_difference(n: int, i: int, j: int) -> np.ndarray:
    """``lambda_ij = lambda_j - lambda_i``."""
    return weight(n, j) - weight(n, i)


def omega(n: int) -> np.ndarray:
    if n % 2:
        raise GerbeError("omega needs even n")
    m = n // 2
    out = np.zeros((n, n))
    out[:m, m:] = np.eye(m)
    out[m:, :m] = -np.eye(m)
    return out


def reflected_index(i: int, n: int) -> int:
    return (i + n // 2) % n


def omega_conjugation_residual(n: int) -> float:
    """Max deviation of ``omega lambda_j omega^-1`` from ``lambda_{j^r} - lambda_m``."""
    w = omega(n)
    m = n // 2
    return max(float(np.abs(w @ weight(n, j) @ w.T - weight(n, reflected_index(j, n))
                            + weight(n, m)).max()) for j in range(n))


# --- alcove charts --------------------------------------------------------

@dataclass(frozen=True)
class GerbeChart:
    """``g = gamma exp(2 pi i diag(psi)) gamma^-1`` with ``gamma`` in SU(n)."""

    g: np.ndarray
    gamma: np.ndarray
    psi: np.ndarray
    tau: np.ndarray

    @property
    def margins(self) -> np.ndarray:
        return self.tau

    def member(self, i: int, margin: float = 0.0) -> bool:
        return bool(self.tau[..., i] > margin)

    def tau_matrix(self) -> np.ndarray:
        return np.diag(self.psi)

    def reconstruct(self) -> np.ndarray:
        return (self.gamma * np.exp(2j * np.pi * self.psi)[..., None, :]) @ dagger(self.gamma)


def _lift(phases: np.ndarray, vecs: np.ndarray):
    """Alcove lift of eigenphases in [0, 2 pi); batched over leading axes."""
    n = phases.shape[-1]
    phi = phases / (2 * np.pi)
    order = np.argsort(-phi, axis=-1, kind="stable")
    phi = np.take_along_axis(phi, order, -1)
    vecs = np.take_along_axis(vecs, order[..., None, :], -1)
    s = np.rint(phi.sum(axis=-1)).astype(int) % n
    # the s largest phases wrap down by one
    idx = (np.arange(n) + s[..., None]) % n
    psi = np.take_along_axis(phi, idx, -1) - (np.arange(n) >= n - s[..., None])
    vecs = np.take_along_axis(vecs, idx[..., None, :], -1)
    psi = psi - psi.mean(axis=-1, keepdims=True)
    tau = np.empty_like(psi)
    tau[..., 1:] = psi[..., :-1] - psi[..., 1:]
    tau[..., 0] = 1.0 - (psi[..., 0] - psi[..., -1])
    return psi, tau, vecs


def alcove(g: np.ndarray, tol: float = 1e-8) -> GerbeChart:
    """Alcove chart of a special unitary matrix (or stack of them)."""
    g = np.asarray(g, dtype=complex)
    n = g.shape[-1]
    det = np.linalg.det(g)
    if np.any(np.abs(det - 1) > tol) or np.any(
            np.linalg.norm(dagger(g) @ g - np.eye(n), axis=(-2, -1)) > tol):
        raise GerbeError("alcove needs special unitary input")
    data = unitary_eig(g)
    psi, tau, gamma = _lift(data.eigenphases, data.eigenvectors)
    gd = np.linalg.det(gamma)
    gamma = gamma.copy()
    gamma[..., :, 0] *= np.conj(gd)[..., None]
    return GerbeChart(g, gamma, psi, tau)


# --- characters -----------------------------------------------------------

def _block(i: int, j: int):
    lo, hi = min(i, j), max(i, j)
    return slice(lo, hi), (1 if j > i else -1)


def stabilizer_residual(gamma0: np.ndarray, i: int, j: int) -> float:
    n = gamma0.shape[-1]
    lam = weight_difference(n, i, j)
    return float(np.linalg.norm(gamma0 @ lam - lam @ gamma0))


def character(gamma0: np.ndarray, i: int, j: int, tol: float = 1e-8) -> complex:
    """``chi_ij`` on the stabilizer of ``lambda_ij``: a block determinant power."""
    if i == j:
        return 1.0 + 0j
    if stabilizer_residual(gamma0, i, j) > tol:
        raise GerbeError(f"element is not in the stabilizer G_{i}{j}")
    blk, sign = _block(i, j)
    d = np.linalg.det(gamma0[blk, blk])
    return complex(d if sign > 0 else 1 / d)


def character_along_path(path, i: int, j: int, steps: int = 400, tol: float = 1e-8) -> complex:
    """Integrate ``d ln chi = tr(lambda_ij gamma^-1 d gamma)`` along ``path(t)``, t in [0, 1].

    Each step contributes ``log det`` of the block of ``gamma(t)^-1 gamma(t + dt)``,
    which is exact for paths in the stabilizer.
    """
    if i == j:
        return 1.0 + 0j
    blk, sign = _block(i, j)
    prev = path(0.0)
    if np.linalg.norm(prev - np.eye(prev.shape[0])) > tol:
        raise GerbeError("character paths start at the identity")
    total = 0.0j
    for t in np.linspace(0, 1, steps + 1)[1:]:
        cur = path(t)
        if stabilizer_residual(cur, i, j) > tol:
            raise GerbeError("path leaves the stabilizer")
        total += np.log(np.linalg.det((dagger(prev) @ cur)[blk, blk]))
        prev = cur
    return complex(np.exp(sign * total))


def stabilizer_log(gamma0: np.ndarray, i: int, j: int) -> np.ndarray:
    """Traceless block-diagonal logarithm of an element of ``G_ij``."""
    n = gamma0.shape[0]
    blk, _ = _block(i, j)
    mask = np.zeros(n, bool)
    mask[blk] = True
    x = np.zeros((n, n), complex)
    for sel in (mask, ~mask):
        if sel.any():
            x[np.ix_(sel, sel)] = unitary_log(gamma0[np.ix_(sel, sel)])
    # restore tracelessness by shifting one eigenphase by 2 pi k
    k = int(np.rint(np.trace(x).imag / (2 * np.pi)))
    if k:
        vals, vecs = np.linalg.eigh(-1j * x)
        vals[0] -= 2 * np.pi * k
        x = 1j * (vecs * vals) @ dagger(vecs)
        x = np.where(np.outer(mask, mask) | np.outer(~mask, ~mask), x, 0)
    return x


# --- the two-form B_i -----------------------------------------------------

def _q(x: np.ndarray) -> np.ndarray:
    """``(sin(2 pi x)/(2 pi) - x) / (4 sin^2(pi x))`` with its small-x series."""
    x = np.asarray(x, float)
    small = np.abs(x) < 1e-3
    safe = np.where(small, 0.5, x)
    full = (np.sin(2 * np.pi * safe) / (2 * np.pi) - safe) / (4 * np.sin(np.pi * safe) ** 2)
    series = -x / 6 - np.pi ** 2 * x ** 3 / 45
    return np.where(small, series, full)


def b_density(psi: np.ndarray, gamma: np.ndarray, i, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``B_i(g)(u, v)`` for left-trivialized tangents ``u, v`` in su(n).

    Uses the eigenbasis form: with ``N = gamma^-1 u gamma``, the B-form is a sum
    over eigenvalue pairs ``a < b`` of ``i q(x_ab) (N_ab M_ba - M_ab N_ba)``
    where ``x_ab = psi_b - psi_a + [a <= i < b]``.  The diagonal gauge freedom
    of ``gamma`` drops out and the pair terms stay bounded at degeneracies.
    Batched over leading axes; ``i`` may be an integer array.
    """
    n = psi.shape[-1]
    nu = dagger(gamma) @ u @ gamma
    nv = dagger(gamma) @ v @ gamma
    pos = np.arange(n)
    i = np.asarray(i)[..., None, None]
    straddle = (pos[:, None] < i) & (pos[None, :] >= i)
    x = psi[..., None, :] - psi[..., :, None] + straddle
    upper = pos[:, None] < pos[None, :]
    pair = nu * np.swapaxes(nv, -1, -2) - nv * np.swapaxes(nu, -1, -2)
    val = 1j * np.where(upper, _q(np.where(upper, x, 0.0)) * pair, 0)
    return val.sum(axis=(-2, -1)).real


def b_literal(gamma: np.ndarray, dgamma_u: np.ndarray, dgamma_v: np.ndarray,
              psi: np.ndarray, i: int) -> float:
    """``B_i`` evaluated term by term from ``gamma^-1 d gamma`` (two tangent directions)."""
    n = psi.shape[-1]
    gu = np.linalg.solve(gamma, dgamma_u)
    gv = np.linalg.solve(gamma, dgamma_v)
    e = np.diag(np.exp(2j * np.pi * psi))
    ei = np.diag(np.exp(-2j * np.pi * psi))
    first = (np.trace(gu @ e @ gv @ ei) - np.trace(gv @ e @ gu @ ei)) / (4 * np.pi)
    shift = np.diag(psi) - weight(n, i)
    second = 1j * (np.trace(shift @ gu @ gv) - np.trace(shift @ gv @ gu))
    return complex(first + second)


def b_difference(gamma: np.ndarray, dgamma_u: np.ndarray, dgamma_v: np.ndarray,
                 i: int, j: int) -> complex:
    """``-tr lambda_ij (gamma^-1 d gamma)^2`` on a tangent pair.

    The value is imaginary; the real two-form ``B_j - B_i`` is ``i`` times it.
    """
    n = gamma.shape[-1]
    gu = np.linalg.solve(gamma, dgamma_u)
    gv = np.linalg.solve(gamma, dgamma_v)
    lam = weight_difference(n, i, j)
    return complex(-(np.trace(lam @ gu @ gv) - np.trace(lam @ gv @ gu)))


# --- local charts on small simplices --------------------------------------

def centred_logs(gs: np.ndarray, iterations: int = 2):
    """Base point ``g_c`` and logs ``X_k = log(g_c^-1 g_k)`` with ``sum X_k ~ 0``.

    ``gs`` has shape ``(..., k, n, n)``; the first vertex seeds the base point.
    """
    base = gs[..., 0, :, :]
    for _ in range(iterations):
        xs = unitary_log(dagger(base)[..., None, :, :] @ gs)
        base = base @ expm_antihermitian(xs.mean(axis=-3))
    xs = unitary_log(dagger(base)[..., None, :, :] @ gs)
    return base, xs


def triangle_integral(g0, g1, g2, i, subdivisions: int = 1) -> np.ndarray:
    """``int B_i`` over the small triangle spanned by three group elements.

    The triangle is the image of the flat simplex in exponential coordinates
    around its centroid; sub-triangles are evaluated at their own centroids.
    """
    if subdivisions == 1:
        gc, xs = centred_logs(np.stack([g0, g1, g2], axis=-3))
        ch = alcove(_to_su(gc))
        return 0.5 * b_density(ch.psi, ch.gamma, i, xs[..., 1, :, :] - xs[..., 0, :, :],
                               xs[..., 2, :, :] - xs[..., 0, :, :])
    gc, xs = centred_logs(np.stack([g0, g1, g2], axis=-3))
    s = subdivisions
    total = 0.0
    pts = {}
    for a in range(s + 1):
        for b in range(s + 1 - a):
            x = xs[..., 0, :, :] + (a / s) * (xs[..., 1, :, :] - xs[..., 0, :, :]) \
                + (b / s) * (xs[..., 2, :, :] - xs[..., 0, :, :])
            pts[a, b] = gc @ expm_antihermitian(x)
    for a in range(s):
        for b in range(s - a):
            total = total + triangle_integral(pts[a, b], pts[a + 1, b], pts[a, b + 1], i)
            if a + b < s - 1:
                total = total + triangle_integral(pts[a + 1, b], pts[a + 1, b + 1],
                                                  pts[a, b + 1], i)
    return total


def _dexp(y: np.ndarray, z: np.ndarray, terms: int = 14) -> np.ndarray:
    """Left-trivialized image ``sum (-ad_y)^k z / (k+1)!`` of the chart tangent ``z`` at ``exp(y)``."""
    out = z.copy()
    c = z
    for k in range(1, terms):
        c = -(y @ c - c @ y) / (k + 1)
        out = out + c
    return out


def geodesic_triangle_flux(gc, xs, vert, cen, mid, g_mid, i) -> np.ndarray:
    """``int B_i`` over the triangle with geodesic sides, in the chart around ``gc``.

    ``vert`` and ``mid`` are alcove charts of the vertices and of the geodesic
    side midpoints (sides ``01, 12, 20``), ``cen`` the chart of ``gc``.  The flat
    part uses the degree-3 rule on vertices, midpoints and centroid; each side
    bows away from its chord and that sliver is added with Simpson's rule.
    """
    u = xs[..., 1, :, :] - xs[..., 0, :, :]
    v = xs[..., 2, :, :] - xs[..., 0, :, :]
    ym = unitary_log(dagger(gc)[..., None, :, :] @ g_mid)
    ii = np.asarray(i)[..., None] if np.ndim(i) else i
    f_c = b_density(cen.psi, cen.gamma, i, u, v)
    uv = u[..., None, :, :], v[..., None, :, :]
    f_m = b_density(mid.psi, mid.gamma, ii, _dexp(ym, uv[0]), _dexp(ym, uv[1])).sum(-1)
    f_v = b_density(vert.psi, vert.gamma, ii, _dexp(xs, uv[0]), _dexp(xs, uv[1])).sum(-1)
    area = 0.5 * (27 * f_c + 8 * f_m + 3 * f_v) / 60
    xa, xb = xs, np.roll(xs, -1, axis=-3)
    bow = ym - 0.5 * (xa + xb)
    sliver = b_density(mid.psi, mid.gamma, ii, _dexp(ym, xb - xa), _dexp(ym, bow))
    return area - (2 / 3) * sliver.sum(-1)


def geodesic_midpoints(gs: np.ndarray) -> np.ndarray:
    """Midpoints ``g_a exp(log(g_a^-1 g_b) / 2)`` of the sides ``01, 12, 20``."""
    ga, gb = gs, np.roll(gs, -1, axis=-3)
    return ga @ expm_antihermitian(0.5 * unitary_log(dagger(ga) @ gb))


def triangle_flux(g0, g1, g2, i) -> np.ndarray:
    """``int B_i`` over the small triangle whose sides are geodesics between the vertices."""
    gs = np.stack([g0, g1, g2], axis=-3)
    gc, xs = centred_logs(gs)
    mids = geodesic_midpoints(gs)
    return geodesic_triangle_flux(gc, xs, alcove(_to_su(gs)), alcove(_to_su(gc)),
                                  alcove(_to_su(mids)), mids, i)


def _to_su(g: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    det = np.linalg.det(g)
    return g * np.exp(-1j * np.angle(det) / n)[..., None, None]


# --- chart paths and edge transport ---------------------------------------

def _clusters(psi: np.ndarray, tol: float) -> list[np.ndarray]:
    n = len(psi)
    out, cur = [], [0]
    for a in range(1, n):
        if psi[a - 1] - psi[a] < tol:
            cur.append(a)
        else:
            out.append(np.array(cur))
            cur = [a]
    out.append(np.array(cur))
    return out


def chart_path(gs, cluster_tol: float = 1e-6, min_overlap: float = 0.5) -> list[GerbeChart]:
    """Alcove charts along a sampled path with eigenvectors aligned step by step.

    Within each degenerate cluster the new frame is rotated by the unitary
    Procrustes solution closest to the previous frame; the result is normalized
    to SU(n) with a continuous determinant correction.
    """
    charts = [alcove(g) for g in gs]
    out = [charts[0]]
    for ch in charts[1:]:
        prev = out[-1].gamma
        gam = ch.gamma.copy()
        ov = dagger(gam) @ prev
        for cl in _clusters(ch.psi, cluster_tol):
            blk = np.ix_(cl, cl)
            if np.linalg.svd(ov[blk], compute_uv=False).min() < min_overlap:
                raise GerbeError("eigenphase clusters cross between samples; refine the path")
            gam[:, cl] = gam[:, cl] @ polar_unitary(ov[blk])
        det = np.linalg.det(gam)
        gam[:, 0] *= np.conj(det) / abs(det)
        out.append(GerbeChart(ch.g, gam, ch.psi, ch.tau))
    return out


def block_phase(gamma_to: np.ndarray, gamma_from: np.ndarray, i, j) -> np.ndarray:
    """Transport factor from ``gamma_from`` to ``gamma_to`` in ``L_ij`` (one step).

    ``phase(det S)^{+-1}`` with ``S`` the ``(min, max]`` block of
    ``gamma_to^dag gamma_from``; batched, ``i`` and ``j`` may be arrays.
    """
    ov = dagger(gamma_to) @ gamma_from
    i = np.broadcast_to(np.asarray(i), ov.shape[:-2])
    j = np.broadcast_to(np.asarray(j), ov.shape[:-2])
    out = np.ones(ov.shape[:-2], complex)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    for a, b in {(int(x), int(y)) for x, y in zip(lo.ravel(), hi.ravel()) if x != y}:
        sel = (lo == a) & (hi == b)
        d = np.linalg.det(ov[sel][:, a:b, a:b])
        z = d / np.abs(d)
        out[sel] = np.where(j[sel] > i[sel], z, np.conj(z))
    return out


@dataclass(frozen=True)
class EdgeTransport:
    z: complex
    gamma_start: np.ndarray
    gamma_end: np.ndarray
    modulus_error: float


def edge_transport(gs, i: int, j: int) -> EdgeTransport:
    """Parallel transport ``[gamma(0), 1] -> [gamma(1), z]`` in ``L_ij`` along sampled ``gs``.

    ``z = exp(-int tr(lambda_ij gamma^-1 d gamma))`` accumulated over aligned
    chart steps.
    """
    charts = chart_path(gs)
    for ch in charts:
        if ch.tau[i] <= 0 or ch.tau[j] <= 0:
            raise GerbeError(f"edge leaves O_{i}{j}")
    blk, sign = _block(i, j)
    phase, err = 0.0, 0.0
    for a, b in zip(charts[:-1], charts[1:]):
        if i != j:
            d = np.linalg.det((dagger(b.gamma) @ a.gamma)[blk, blk])
            phase += np.angle(d)
            err = max(err, abs(abs(d) - 1))
    z = np.exp(1j * sign * phase)
    return EdgeTransport(complex(z), charts[0].gamma, charts[-1].gamma, float(err))


# --- fields on the torus --------------------------------------------------

def _pad_axis(f: np.ndarray, axis: int, m: int) -> np.ndarray:
    n = f.shape[axis]
    h = n // 2
    shape = list(f.shape)
    shape[axis] = m
    out = np.zeros(shape, complex)
    take = lambda sl: tuple(sl if a == axis else slice(None) for a in range(f.ndim))
    out[take(slice(0, h))] = f[take(slice(0, h))]
    out[take(slice(m - h + 1, m))] = f[take(slice(h + 1, n))]
    # split the Nyquist mode so the interpolant stays real-symmetric under k -> -k
    out[take(slice(h, h + 1))] += 0.5 * f[take(slice(h, h + 1))]
    out[take(slice(m - h, m - h + 1))] += 0.5 * f[take(slice(h, h + 1))]
    return out


def fourier_refine(field: np.ndarray, factor: int = 2) -> np.ndarray:
    """Trigonometric interpolation of an SU(n) field on a finer grid, projected back to SU(n)."""
    d = field.ndim - 2
    spec = np.fft.fftn(field, axes=tuple(range(d)))
    for ax in range(d):
        spec = _pad_axis(spec, ax, factor * field.shape[ax])
    fine = np.fft.ifftn(spec, axes=tuple(range(d))) * factor ** d
    return _to_su(polar_unitary(fine))


def is_symmetric_field(field: np.ndarray, tol: float = 1e-8) -> bool:
    """``w(-k) = -w(k)^T`` on the grid."""
    ref = field
    for ax in range(field.ndim - 2):
        ref = np.take(ref, (-np.arange(field.shape[ax])) % field.shape[ax], axis=ax)
    return bool(np.max(np.abs(ref + np.swapaxes(field, -1, -2))) < tol)


# --- triangulation --------------------------------------------------------

@dataclass(frozen=True)
class Triangulation:
    sizes: tuple[int, int]
    diagonal: str
    psi: np.ndarray             # (V, n) vertex charts, flat vertex order
    gamma: np.ndarray           # (V, n, n)
    tau: np.ndarray             # (V, n)
    triangles: np.ndarray       # (T, 3) counter-clockwise vertex ids
    i_c: np.ndarray
    margin_c: np.ndarray
    b_integrals: np.ndarray     # (T,)
    edges: np.ndarray           # (E, 2) vertex ids, first < second
    i_b: np.ndarray
    margin_b: np.ndarray
    tri_edges: np.ndarray       # (T, 3) edge ids for sides (v0v1, v1v2, v2v0)
    gamma_mid: np.ndarray       # (E, n, n) frames at edge midpoints

    @property
    def min_margin(self) -> float:
        return float(min(self.margin_c.min(), self.margin_b.min()))


def _cells(sizes, diagonal):
    n1, n2 = sizes
    j1, j2 = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    vid = lambda a, b: ((j1 + a) % n1) * n2 + (j2 + b) % n2
    p00, p10, p11, p01 = vid(0, 0), vid(1, 0), vid(1, 1), vid(0, 1)
    if diagonal == "main":
        tris = [(p00, p10, p11), (p00, p11, p01)]
    elif diagonal == "anti":
        tris = [(p00, p10, p01), (p10, p11, p01)]
    else:
        raise GerbeError("diagonal must be 'main' or 'anti'")
    return np.concatenate([np.stack([a.ravel(), b.ravel(), c.ravel()], 1) for a, b, c in tris])


# alternative indices drawn by the random choice must keep this much margin
RANDOM_CHOICE_MARGIN = 0.25


def _pick(margins: np.ndarray, margin_tol: float, choice: str, rng) -> np.ndarray:
    """Index per simplex: the maximal margin (ties to the smallest index) or a random admissible one.

    Random choices only consider indices with margin at least
    ``RANDOM_CHOICE_MARGIN`` (or the best one when none qualifies): near an
    alcove wall the local forms are steep and quadrature errors grow.
    """
    if choice == "max":
        return np.argmax(margins, axis=-1)
    if choice != "random":
        raise GerbeError("index choice must be 'max' or 'random'")
    ok = margins >= max(margin_tol, RANDOM_CHOICE_MARGIN)
    ok |= margins == margins.max(axis=-1, keepdims=True)
    scores = np.where(ok, rng.random(margins.shape), -1.0)
    return np.argmax(scores, axis=-1)


def triangulate(field: np.ndarray, diagonal: str = "main", margin_tol: float = 0.02,
                choice: str = "max", seed: int = 0) -> Triangulation:
    """Grid triangulation of a sampled SU(n) field on T^2 with covering indices."""
    if field.ndim != 4:
        raise GerbeError("triangulate needs a 2d field of matrices")
    n1, n2, n, _ = field.shape
    rng = np.random.default_rng(seed)
    flat = field.reshape(-1, n, n)
    ch = alcove(flat)
    tris = _cells((n1, n2), diagonal)
    gc, xs = centred_logs(flat[tris])
    cc = alcove(_to_su(gc))
    m_c = np.minimum(ch.tau[tris].min(axis=1), cc.tau)
    i_c = _pick(m_c, margin_tol, choice, rng)
    margin_c = np.take_along_axis(m_c, i_c[:, None], 1)[:, 0]
    if margin_c.min() < margin_tol:
        raise MarginError(f"triangle margin {margin_c.min():.3g} below {margin_tol}")
    sides = np.stack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]], 1)
    keys = np.sort(sides, axis=-1).reshape(-1, 2)
    edges, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1, 3)
    gu = flat[edges[:, 0]]
    g_mid = gu @ expm_antihermitian(0.5 * unitary_log(dagger(gu) @ flat[edges[:, 1]]))
    mid = alcove(_to_su(g_mid))
    vert = GerbeChart(None, ch.gamma[tris], ch.psi[tris], ch.tau[tris])
    mids = GerbeChart(None, mid.gamma[inv], mid.psi[inv], mid.tau[inv])
    b = geodesic_triangle_flux(gc, xs, vert, cc, mids, g_mid[inv], i_c)
    m_b = np.minimum(np.minimum(ch.tau[edges[:, 0]], ch.tau[edges[:, 1]]), mid.tau)
    i_b = _pick(m_b, margin_tol, choice, rng)
    margin_b = np.take_along_axis(m_b, i_b[:, None], 1)[:, 0]
    if margin_b.min() < margin_tol:
        raise MarginError(f"edge margin {margin_b.min():.3g} below {margin_tol}")
    return Triangulation((n1, n2), diagonal, ch.psi, ch.gamma, ch.tau, tris, i_c, margin_c,
                         b, edges, i_b, margin_b, inv, mid.gamma)


def edge_factors(tri: Triangulation) -> np.ndarray:
    """Transport factor for every (edge, triangle) pair, edge oriented as the triangle boundary.

    Every vertex keeps a single frame for all the line elements attached to it,
    so the tensor contraction at the vertices is multiplication of numbers.
    The one-step transport and the two-step transport through the edge
    midpoint are combined by Richardson extrapolation (local error h^3 -> h^5).
    """
    t = tri.triangles
    src = np.stack([t[:, 0], t[:, 1], t[:, 2]], 1)
    dst = np.stack([t[:, 1], t[:, 2], t[:, 0]], 1)
    i_c = np.repeat(tri.i_c[:, None], 3, 1)
    i_b = tri.i_b[tri.tri_edges]
    gm = tri.gamma_mid[tri.tri_edges]
    one = block_phase(tri.gamma[dst], tri.gamma[src], i_c, i_b)
    two = block_phase(tri.gamma[dst], gm, i_c, i_b) * block_phase(gm, tri.gamma[src], i_c, i_b)
    return two * np.exp(1j * np.angle(two / one) / 3)


@dataclass(frozen=True)
class HolonomyResult:
    amplitude: complex
    error: float
    trace: list = field(default_factory=list)   # (grid size, amplitude) per level
    b_phase: float = 0.0
    edge_phase: float = 0.0
    min_margin: float = float("nan")

    @property
    def phase(self) -> float:
        return float(np.angle(self.amplitude))

    def distance_to(self, target: complex) -> float:
        return float(abs(self.amplitude - target))


def holonomy(tri: Triangulation) -> HolonomyResult:
    """``exp(i sum_c int_c B_{i_c})`` times all edge transports."""
    b_phase = float(np.sum(tri.b_integrals))
    z = edge_factors(tri)
    edge_phase = float(np.angle(np.prod(z)))
    amp = np.exp(1j * (b_phase + edge_phase))
    return HolonomyResult(complex(amp), 0.0, [(tri.sizes, complex(amp))], b_phase,
                          edge_phase, tri.min_margin)


# error floor for fields whose discrete holonomy is exact up to rounding
ROUNDING_FLOOR = 1e-12


def wz_amplitude(field: np.ndarray, levels: int = 2, diagonal: str = "main",
                 margin_tol: float = 0.02, choice: str = "max", seed: int = 0,
                 max_extra: int = 2, target_error: float | None = None,
                 max_levels: int = 4) -> HolonomyResult:
    """Gerbe holonomy of a reduced sewing field with Fourier refinement.

    ``levels`` successive doublings are evaluated (level 0 is the input grid);
    levels that fail the margin test are skipped by refining further, up to
    ``max_extra`` additional doublings.  With ``target_error`` set, refinement
    continues (up to ``max_levels``) until two consecutive levels agree to it.
    The amplitude is the Richardson combination of the last two levels (second
    order) and the error estimate their phase difference.
    """
    trace, cur, extra = [], field, 0

    def more():
        if len(trace) < levels:
            return True
        if target_error is None or len(trace) >= max_levels:
            return False
        return abs(np.angle(trace[-1][1] / trace[-2][1])) > target_error

    while more():
        try:
            res = holonomy(triangulate(cur, diagonal, margin_tol, choice, seed))
            trace.append((cur.shape[:2], res.amplitude, res))
        except MarginError:
            if not trace and extra < max_extra:
                extra += 1
            elif not trace:
                raise
        if more():
            cur = fourier_refine(cur)
    last = trace[-1][2]
    if len(trace) == 1:
        return HolonomyResult(last.amplitude, float("nan"), [(s, a) for s, a, _ in trace],
                              last.b_phase, last.edge_phase, last.min_margin)
    p1 = np.angle(trace[-1][1])
    d = float(np.angle(trace[-1][1] / trace[-2][1]))
    amp = np.exp(1j * (p1 + d / 3))
    err = max(abs(d), ROUNDING_FLOOR * np.prod(trace[-1][0]))
    return HolonomyResult(complex(amp), err, [(s, a) for s, a, _ in trace],
                          last.b_phase, last.edge_phase, last.min_margin)


def diagnostic_dump(tri: Triangulation) -> str:
    """Per-simplex indices, margins, B-integrals and edge factors as plain text."""
    z = edge_factors(tri)
    lines = [f"# grid {tri.sizes[0]}x{tri.sizes[1]} diagonal={tri.diagonal}",
             "# tri v0 v1 v2 i_c margin b_integral z01 z12 z20"]
    for t, (v, i, m, b, zz) in enumerate(zip(tri.triangles, tri.i_c, tri.margin_c,
                                             tri.b_integrals, z)):
        zs = " ".join(f"{np.angle(x):+.12e}" for x in zz)
        lines.append(f"tri {t} {v[0]} {v[1]} {v[2]} {i} {m:.6f} {b:+.12e} {zs}")
    lines.append("# edge id u v i_b margin")
    for e, (uv, i, m) in enumerate(zip(tri.edges, tri.i_b, tri.margin_b)):
        lines.append(f"edge {e} {uv[0]} {uv[1]} {i} {m:.6f}")
    return "\n".join(lines) + "\n"


# --- the Pfaffian identity at a single antisymmetric matrix -----------------

@dataclass(frozen=True)
class PfaffianCharacterReport:
    pfaffian: complex
    predicted: complex
    residual: float
    index: int
    reflected: int
    margin: float
    stabilizer_residual: float


def lemma2_check(w: np.ndarray, tol: float = 1e-8, margin_tol: float = 1e-6) -> PfaffianCharacterReport:
    """Compare ``pf w`` with ``i^{m^2} (-1)^i chi_{i i^r}(gamma_0)`` for antisymmetric SU(n) ``w``."""
    w = np.asarray(w, complex)
    n = w.shape[0]
    if n % 2:
        raise GerbeError("needs even n")
    if np.linalg.norm(w + w.T) > tol:
        raise GerbeError("matrix is not antisymmetric")
    m = n // 2
    ch = alcove(w)
    both = np.array([min(ch.tau[i], ch.tau[reflected_index(i, n)]) for i in range(n)])
    i = int(np.argmax(both))
    if both[i] < margin_tol:
        raise GerbeError("matrix lies on an alcove wall: no O_{i i^r} with margin")
    ir = reflected_index(i, n)
    gam = ch.gamma
    g0 = dagger(gam) @ np.conj(gam) @ omega(n).T
    stab = stabilizer_residual(g0, i, ir)
    chi = character(g0, i, ir, tol=max(1e-6, 10 * stab))
    pred = (1j) ** (m * m) * (-1) ** i * chi
    pf = pfaffian(w, tol=1e-8)
    return PfaffianCharacterReport(pf, complex(pred), float(abs(pf - pred)), i, ir, float(both[i]), stab)
