"""Shared builders for the test suite."""

from functools import lru_cache
from itertools import permutations

import numpy as np

from z2gerbe import bundle, models, sewing, wzcs
from z2gerbe.numlin import random_antihermitian

PAULI = (np.array([[0, 1], [1, 0]], complex), np.array([[0, -1j], [1j, 0]]),
         np.diag([1.0, -1.0]).astype(complex))
ISY = np.array([[0, 1], [-1, 0]], complex)


def random_antisymmetric(n, rng):
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return z - z.T


def pfaffian_by_matchings(a):
    """Sum over perfect matchings; exponential cost, only for n <= 8."""
    n = a.shape[0]
    if n == 0:
        return 1.0 + 0j
    total = 0j
    for j in range(1, n):
        rest = [k for k in range(1, n) if k != j]
        total += (-1) ** (j - 1) * a[0, j] * pfaffian_by_matchings(a[np.ix_(rest, rest)])
    return total


def det_by_permutations(a):
    n = a.shape[0]
    total = 0j
    for p in permutations(range(n)):
        inv = sum(1 for i in range(n) for j in range(i + 1, n) if p[i] > p[j])
        total += (-1) ** inv * np.prod([a[i, p[i]] for i in range(n)])
    return total


def trig_field(n, seed, amp=1.0, modes=2, parity=None):
    """Smooth periodic scalar field on an n x n grid from a few Fourier modes."""
    rng = np.random.default_rng(seed)
    k = 2 * np.pi * np.arange(n) / n
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    out = np.zeros((n, n))
    for a in range(-modes, modes + 1):
        for b in range(-modes, modes + 1):
            c = rng.normal() * amp / (1 + a * a + b * b)
            ph = a * k1 + b * k2
            if parity == "odd":
                out += c * np.sin(ph)
            elif parity == "even":
                out += c * np.cos(ph)
            else:
                out += c * np.cos(ph + rng.uniform(0, 2 * np.pi))
    return out


def random_generator_field(n_grid, seed, n=2, amp=1.0, parity=None, gens=3):
    """``Y = sum_a f_a X_a`` with Pauli generators (n = 2) or random su(n) ones."""
    rng = np.random.default_rng(seed)
    if n == 2:
        xs = [1j * p for p in PAULI]
    else:
        xs = [random_antihermitian(n, rng, traceless=True) for _ in range(gens)]
    fs = [trig_field(n_grid, 1000 * seed + i, amp=amp, parity=parity) for i in range(len(xs))]
    return wzcs.exponential_family(fs, xs)


def symmetric_field(n_grid, seed, amp=1.0):
    """``exp(Y(k)) i sigma_y`` with odd ``Y``: antisymmetric under ``k -> -k``."""
    return wzcs.expm_field(random_generator_field(n_grid, seed, amp=amp, parity="odd")) @ ISY


@lru_cache(maxsize=None)
def pipeline(name, n, items=()):
    """(model, projectors, frame, sewing field, det branch) for a built-in model."""
    model = models.build(name, **dict(items))
    pf = bundle.valence_projectors(model, bundle.BZGrid.square(model.d, n))
    frame = bundle.smooth_frame(pf)
    sf = sewing.sewing_matrix(frame, model.theta)
    return model, pf, frame, sf, sewing.det_branch(sf)


def reduced(name, n, **params):
    _, _, _, sf, br = pipeline(name, n, tuple(sorted(params.items())))
    return sewing.reduce_su(sf, br)
