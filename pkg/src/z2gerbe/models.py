"""Tight-binding Bloch Hamiltonians with an odd time-reversal operator.

A model is a finite Fourier series ``H(k) = sum_R exp(i k.R) T_R`` over integer
displacements ``R``, so ``H`` is exactly ``2*pi``-periodic in every component
of the reduced momentum ``k``.  Time reversal acts as ``v -> u_theta @ conj(v)``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

TRS_TOL = 1e-12
_SIGMA_Y = np.array([[0, -1j], [1j, 0]])
_ISY = 1j * _SIGMA_Y  # [[0, 1], [-1, 0]]
PAULI = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    _SIGMA_Y.astype(complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class TimeReversalOperator:
    u_theta: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u_theta, dtype=complex)
        n = u.shape[0]
        if u.shape != (n, n):
            raise ModelError("u_theta must be square")
        if n % 2:
            raise ModelError("odd time reversal needs an even matrix size")
        if np.linalg.norm(u.conj().T @ u - np.eye(n)) > 1e-10:
            raise ModelError("u_theta is not unitary")
        sq = u @ u.conj()
        if np.linalg.norm(sq + np.eye(n)) > 1e-10:
            if np.linalg.norm(sq - np.eye(n)) < 1e-10:
                raise ModelError("even time reversal (theta^2 = +I) is not supported")
            raise ModelError("theta^2 is neither -I nor +I")
        object.__setattr__(self, "u_theta", u)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.u_theta @ np.conj(v)

    def conjugate(self, h: np.ndarray) -> np.ndarray:
        """theta h theta^{-1} for a matrix (or stack) ``h``."""
        return self.u_theta @ np.conj(h) @ self.u_theta.conj().T

    @classmethod
    def standard(cls, n_orb: int) -> "TimeReversalOperator":
        """``I_orb (x) i sigma_y`` for an orbital-major, spin-minor basis."""
        return cls(np.kron(np.eye(n_orb), _ISY))


@dataclass(frozen=True)
class BlochModel:
    d: int
    size: int
    hoppings: tuple[tuple[tuple[int, ...], np.ndarray], ...]
    theta: TimeReversalOperator | None
    fermi: float = float("nan")
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ModelError("only d = 2 or 3 is supported")
        seen = {}
        for r, t in self.hoppings:
            if len(r) != self.d:
                raise ModelError(f"displacement {r} has wrong dimension")
            t = np.asarray(t, dtype=complex)
            if t.shape != (self.size, self.size):
                raise ModelError(f"hopping block at {r} has wrong shape")
            seen[tuple(int(x) for x in r)] = t
        for r, t in seen.items():
            mr = tuple(-x for x in r)
            if mr not in seen:
                raise ModelError(f"missing conjugate hopping for R={r}")
            if np.linalg.norm(seen[mr] - t.conj().T) > 1e-12 * max(1.0, np.linalg.norm(t)):
                raise ModelError(f"T_(-R) != T_R^dagger at R={r}")
        if self.theta is not None and self.theta.u_theta.shape[0] != self.size:
            raise ModelError("theta size does not match the model")
        rs = sorted(seen)
        object.__setattr__(self, "hoppings", tuple((r, seen[r]) for r in rs))
        object.__setattr__(self, "_r", np.array(rs, dtype=float).reshape(len(rs), self.d))
        object.__setattr__(self, "_t", np.array([seen[r] for r in rs]).reshape(
            len(rs), self.size, self.size))
        if np.isnan(self.fermi):
            object.__setattr__(self, "fermi", midgap_fermi(self))

    def evaluate(self, k) -> np.ndarray:
        """H(k) for a point ``k`` of shape (d,) or a batch of shape (..., d)."""
        k = np.asarray(k, dtype=float)
        phase = np.exp(1j * (k @ self._r.T))
        return np.tensordot(phase, self._t, axes=(-1, 0))

    def with_fermi(self, fermi: float) -> "BlochModel":
        return BlochModel(self.d, self.size, self.hoppings, self.theta, float(fermi),
                          self.name, dict(self.params))


def evaluate(model: BlochModel, k) -> np.ndarray:
    return model.evaluate(k)


def _sample_grid(d: int, n: int) -> np.ndarray:
    axes = [2 * np.pi * np.arange(n) / n] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def midgap_fermi(model: BlochModel, samples: int = 24) -> float:
    """Middle of the gap above the lower half of the bands, found by sampling."""
    e = np.linalg.eigvalsh(model.evaluate(_sample_grid(model.d, samples)))
    half = model.size // 2
    lo = e[:, half - 1].max()
    hi = e[:, half].min()
    return float(0.5 * (lo + hi))


def check_trs(model: BlochModel, samples, tol: float = TRS_TOL) -> dict:
    """Largest violation of ``theta H(k) theta^-1 = H(-k)`` over the samples."""
    if model.theta is None:
        raise ModelError("model has no time-reversal operator")
    k = np.asarray(samples, dtype=float).reshape(-1, model.d)
    lhs = model.theta.conjugate(model.evaluate(k))
    viol = float(np.max(np.linalg.norm(lhs - model.evaluate(-k), axis=(-2, -1)), initial=0.0))
    return {"max_violation": viol, "time_reversal_invariant": viol <= tol}


def _from_blocks(d, size, blocks: dict, theta, name, params, fermi=float("nan")):
    full = {}
    for r, t in blocks.items():
        r = tuple(int(x) for x in r)
        mr = tuple(-x for x in r)
        full[r] = full.get(r, 0) + np.asarray(t, dtype=complex)
        if r != mr:
            full[mr] = full.get(mr, 0) + np.asarray(t, dtype=complex).conj().T
    for r in list(full):
        if r == tuple([0] * d):
            full[r] = 0.5 * (full[r] + full[r].conj().T)
    return BlochModel(d, size, tuple(full.items()), theta, fermi, name, params)


# --- built-in models -------------------------------------------------------

_A1 = np.array([1.0, 0.0])
_A2 = np.array([0.5, np.sqrt(3) / 2])
_HONEYCOMB = (np.zeros(2), (_A1 + _A2) / 3)


def _honeycomb_neighbours():
    """NN and NNN bonds of the honeycomb lattice as (i, j, R, d_ij, nu_ij)."""
    nn_len, nnn_len = 1 / np.sqrt(3), 1.0
    bonds_nn, bonds_nnn = [], []
    cells = [(a, b) for a in range(-2, 3) for b in range(-2, 3)]
    for i, pi in enumerate(_HONEYCOMB):
        for r in cells:
            shift = r[0] * _A1 + r[1] * _A2
            for j, pj in enumerate(_HONEYCOMB):
                dvec = pj + shift - pi
                dist = np.linalg.norm(dvec)
                if abs(dist - nn_len) < 1e-9:
                    bonds_nn.append((i, j, r, dvec))
                elif abs(dist - nnn_len) < 1e-9 and i == j:
                    # intermediate site k with both legs nearest-neighbour
                    for r2 in cells:
                        s2 = r2[0] * _A1 + r2[1] * _A2
                        pk = _HONEYCOMB[1 - i] + s2
                        d1, d2 = pk - pi, pj + shift - pk
                        if (abs(np.linalg.norm(d1) - nn_len) < 1e-9
                                and abs(np.linalg.norm(d2) - nn_len) < 1e-9):
                            nu = np.sign(d1[0] * d2[1] - d1[1] * d2[0])
                            bonds_nnn.append((i, j, r, dvec, nu))
                            break
    return bonds_nn, bonds_nnn


def kane_mele(t: float = 1.0, lambda_so: float = 0.06, lambda_r: float = 0.0,
              lambda_v: float = 0.0, zeeman: float = 0.0) -> BlochModel:
    """Kane-Mele honeycomb model; basis (sublattice A/B) x (spin up/down).

    ``zeeman`` adds ``zeeman * s_z`` on site and breaks time reversal; it exists
    for detection tests only.
    """
    sx, sy, sz = PAULI[1], PAULI[2], PAULI[3]
    blocks: dict = {}

    def add(r, i, j, mat):
        blk = blocks.setdefault(tuple(r), np.zeros((4, 4), complex))
        blk[2 * i:2 * i + 2, 2 * j:2 * j + 2] += mat

    nn, nnn = _honeycomb_neighbours()
    for i, j, r, dvec in nn:
        dhat = dvec / np.linalg.norm(dvec)
        add(r, i, j, t * PAULI[0] + 1j * lambda_r * (sx * dhat[1] - sy * dhat[0]))
    for i, j, r, dvec, nu in nnn:
        add(r, i, j, 1j * lambda_so * nu * sz)
    add((0, 0), 0, 0, lambda_v * PAULI[0] + zeeman * sz)
    add((0, 0), 1, 1, -lambda_v * PAULI[0] + zeeman * sz)
    # the bond lists hold both orientations, so the blocks are already complete
    return BlochModel(2, 4, tuple(blocks.items()), TimeReversalOperator.standard(2),
                      float("nan"), "kane_mele",
                      dict(t=t, lambda_so=lambda_so, lambda_r=lambda_r,
                           lambda_v=lambda_v, zeeman=zeeman))


def _gammas_2d():
    t, s = PAULI, PAULI
    return np.kron(t[1], s[3]), np.kron(t[2], s[0]), np.kron(t[3], s[0])


def bhz(a: float = 1.0, b: float = 1.0, c: float = 0.0, d_param: float = 0.0,
        m: float = -1.0) -> BlochModel:
    """Lattice BHZ model, ``M(k) = m + 2b(2 - cos k1 - cos k2)``.

    Basis (orbital) x (spin); inverted at Gamma only for ``-8b < m < 0``.
    """
    g1, g2, g3 = _gammas_2d()
    eye = np.eye(4)
    blocks = {
        (0, 0): (c + 2 * d_param) * eye + (m + 4 * b) * g3,
        (1, 0): a / 2j * g1 - b * g3 - 0.5 * d_param * eye,
        (0, 1): a / 2j * g2 - b * g3 - 0.5 * d_param * eye,
    }
    return _from_blocks(2, 4, blocks, TimeReversalOperator.standard(2), "bhz",
                        dict(a=a, b=b, c=c, d_param=d_param, m=m))


def haldane(t1: float = 1.0, t2: float = 0.2, phi: float = np.pi / 2,
            mass: float = 0.0) -> BlochModel:
    """Spinless Haldane model (no time reversal); a Chern-band test input."""
    blocks: dict = {}
    nn, nnn = _honeycomb_neighbours()
    for i, j, r, _ in nn:
        blk = blocks.setdefault(tuple(r), np.zeros((2, 2), complex))
        blk[i, j] += t1
    for i, j, r, _, nu in nnn:
        blk = blocks.setdefault(tuple(r), np.zeros((2, 2), complex))
        blk[i, j] += t2 * np.exp(1j * phi * nu)
    blocks[(0, 0)] = blocks.get((0, 0), 0) + np.diag([mass, -mass]).astype(complex)
    return BlochModel(2, 2, tuple(blocks.items()), None, float("nan"), "haldane",
                      dict(t1=t1, t2=t2, phi=phi, mass=mass))


def layered_3d(base: BlochModel, t_perp: float = 0.0) -> BlochModel:
    """Stack a 2d model along k3: ``H(k) = H_2d(k1, k2) + t_perp cos(k3) I``."""
    if base.d != 2:
        raise ModelError("layered_3d needs a 2d base model")
    blocks = {}
    for r, t in base.hoppings:
        blocks[tuple(r) + (0,)] = t
    full = dict(blocks)
    eye = np.eye(base.size)
    full[(0, 0, 1)] = full.get((0, 0, 1), 0) + 0.5 * t_perp * eye
    full[(0, 0, -1)] = full.get((0, 0, -1), 0) + 0.5 * t_perp * eye
    params = dict(base.params, t_perp=t_perp, base=base.name)
    return BlochModel(3, base.size, tuple(full.items()), base.theta, float("nan"),
                      "layered_3d", params)


def dirac_3d(m: float = -1.0, a: float = 1.0, b: float = 1.0) -> BlochModel:
    """Cubic-lattice Dirac model ``sum_j a sin k_j G_j + M(k) G_4``.

    ``M(k) = m + 2b sum_j (1 - cos k_j)``; for ``-4b < m < 0`` the band
    inversion sits at Gamma alone and the strong index is odd.
    """
    s = PAULI
    gam = [np.kron(s[1], s[j]) for j in (1, 2, 3)]
    g4 = np.kron(s[3], s[0])
    blocks = {(0, 0, 0): (m + 6 * b) * g4}
    for j in range(3):
        r = [0, 0, 0]
        r[j] = 1
        blocks[tuple(r)] = a / 2j * gam[j] - b * g4
    return _from_blocks(3, 4, blocks, TimeReversalOperator.standard(2), "dirac_3d",
                        dict(m=m, a=a, b=b))


BUILTIN = {"kane_mele": kane_mele, "bhz": bhz, "haldane": haldane, "dirac_3d": dirac_3d}


def build(name: str, **params) -> BlochModel:
    """Build a model by name; ``layered_<base>`` stacks a 2d built-in."""
    if name.startswith("layered_"):
        t_perp = params.pop("t_perp", 0.0)
        return layered_3d(build(name[len("layered_"):], **params), t_perp)
    if name not in BUILTIN:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(BUILTIN)}")
    return BUILTIN[name](**params)


# --- file format -----------------------------------------------------------

def _flatten(mat: np.ndarray) -> list:
    return [[float(z.real), float(z.imag)] for z in np.asarray(mat).ravel()]


def _unflatten(pairs, size: int) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    if arr.shape != (size * size, 2):
        raise ModelError("complex matrix must be size*size [re, im] pairs")
    return (arr[:, 0] + 1j * arr[:, 1]).reshape(size, size)


def _canonical(r) -> bool:
    """Lexicographically positive displacement (or zero)."""
    for x in r:
        if x != 0:
            return x > 0
    return True


def model_to_dict(model: BlochModel) -> dict:
    if model.theta is None:
        raise ModelError("only time-reversal-invariant models can be saved")
    return {
        "dim": model.d,
        "size": model.size,
        "fermi": model.fermi,
        "theta": _flatten(model.theta.u_theta),
        "hoppings": [{"R": list(r), "T": _flatten(t)}
                     for r, t in model.hoppings if _canonical(r)],
    }


def save_model(model: BlochModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def model_from_dict(data: dict, name: str = "custom") -> BlochModel:
    try:
        d, size = int(data["dim"]), int(data["size"])
        theta_raw, hops = data["theta"], data["hoppings"]
    except (KeyError, TypeError) as exc:
        raise ModelError(f"model file misses field {exc}") from exc
    if size % 2:
        raise ModelError("matrix size must be even for odd time reversal")
    theta = TimeReversalOperator(_unflatten(theta_raw, size))
    given = {}
    for h in hops:
        r = tuple(int(x) for x in h["R"])
        if len(r) != d:
            raise ModelError(f"displacement {r} does not match dim={d}")
        given[r] = _unflatten(h["T"], size)
    zero = tuple([0] * d)
    full = {}
    for r, t in given.items():
        mr = tuple(-x for x in r)
        if r == zero:
            if np.linalg.norm(t - t.conj().T) > 1e-12:
                warnings.warn("on-site block not Hermitian; symmetrized", stacklevel=2)
            full[r] = 0.5 * (t + t.conj().T)
        elif mr in given:
            if np.linalg.norm(given[mr] - t.conj().T) > 1e-12 * max(1.0, np.linalg.norm(t)):
                raise ModelError(f"T_(-R) != T_R^dagger at R={r}")
            full[r] = t
        else:
            full[r] = t
            full[mr] = t.conj().T
    fermi = data.get("fermi")
    fermi = float("nan") if fermi is None else float(fermi)
    return BlochModel(d, size, tuple(full.items()), theta, fermi, name, {})


def load_model(path) -> BlochModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"model file is not valid JSON: {exc}") from exc
    return model_from_dict(data, name=Path(path).stem)
