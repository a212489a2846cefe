import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from helpers import PAULI, pipeline, random_generator_field
from z2gerbe import gerbe, wzcs
from z2gerbe.bundle import BZGrid, berry_connection, smooth_frame, valence_projectors
from z2gerbe.models import build, dirac_3d
from z2gerbe.numlin import dagger, expm_antihermitian, random_antihermitian


def unit_quaternion_field(n, m):
    """Degree ``+-1`` (``1 < |m| < 3``), ``-+2`` (``|m| < 1``) or 0 map ``T^3 -> SU(2)``."""
    k = 2 * np.pi * np.arange(n) / n
    k1, k2, k3 = np.meshgrid(k, k, k, indexing="ij")
    d = np.stack([np.sin(k1), np.sin(k2), np.sin(k3), m + np.cos(k1) + np.cos(k2) + np.cos(k3)], -1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d[..., 3, None, None] * np.eye(2) + 1j * np.einsum("...a,aij->...ij", d[..., :3], PAULI)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_h_density_at_the_origin_of_an_exponential_chart(n, seed):
    rng = np.random.default_rng(seed)
    xs = [random_antihermitian(n, rng, traceless=True) for _ in range(3)]
    eps = 1e-6
    # g = exp(sum x_mu X_mu): g^-1 d_mu g at x = 0 is X_mu
    derivs = [(expm(eps * x) - expm(-eps * x)) / (2 * eps) for x in xs]
    comm = xs[1] @ xs[2] - xs[2] @ xs[1]
    expect = np.trace(xs[0] @ comm).real / (4 * np.pi)
    assert wzcs.h_closed_form(*xs) == pytest.approx(expect, abs=1e-12)
    assert wzcs.h_density(*derivs) == pytest.approx(expect, abs=1e-8)


@pytest.mark.parametrize("m,degree", [(-2.0, 1), (2.0, 1), (0.0, -2), (4.0, 0)])
def test_h_integral_is_quantized(m, degree):
    total = wzcs.h_pullback(unit_quaternion_field(32, m))
    assert total / (2 * np.pi) == pytest.approx(degree, abs=1e-8)


def test_h_integral_converges_spectrally():
    errs = [abs(wzcs.h_pullback(unit_quaternion_field(n, -2.0)) - 2 * np.pi) for n in (12, 16, 24)]
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-5


def test_polyakov_wiegmann_identity():
    rng = np.random.default_rng(0)
    x = [random_antihermitian(3, rng, traceless=True) for _ in range(6)]
    w1 = lambda p: expm_antihermitian(np.sin(p[0]) * x[0] + p[1] * p[2] * x[1] + np.cos(p[2]) * x[2])
    w2 = lambda p: expm_antihermitian(p[0] * p[1] * x[3] + np.sin(p[2]) * x[4] + p[0] * x[5])
    p0 = np.array([0.1, 0.2, 0.3])

    def lder(f, eps=1e-5):
        return [dagger(f(p0)) @ (f(p0 + e) - f(p0 - e)) / (2 * eps) for e in np.eye(3) * eps]

    defect = (wzcs.h_density(*lder(lambda p: w1(p) @ w2(p)))
              - wzcs.h_density(*lder(w1)) - wzcs.h_density(*lder(w2)))
    assert abs(defect) > 1e-3           # the exact term is really needed
    for h in (0.4, 0.2):
        assert wzcs.polyakov_wiegmann_check(w1, w2, p0, h) <= 1e-9


# --- WZ actions through the extension oracle ------------------------------

def test_oracle_vanishes_on_commuting_fields():
    n = 16
    k = 2 * np.pi * np.arange(n) / n
    f = np.sin(k)[:, None] + np.cos(2 * k)[None, :]
    y = f[..., None, None] * np.diag([1j, -1j])
    res = wzcs.wz_extension_oracle(y)
    assert abs(res.raw) < 1e-14


@pytest.mark.parametrize("seed", [1, 2])
def test_oracle_is_converged_in_the_extension_direction(seed):
    y = random_generator_field(48, seed)
    a = wzcs.wz_extension_oracle(y, t_nodes=24)
    b = wzcs.wz_extension_oracle(y, t_nodes=48)
    assert abs(a.raw - b.raw) < 1e-10 and a.error < 1e-3


def test_oracle_ignores_the_constant_factor():
    """Holonomy of ``exp(Y) c`` for two different constants ``c``."""
    y = random_generator_field(32, 3, n=3, amp=0.6, gens=4)
    c = expm_antihermitian(random_antihermitian(3, np.random.default_rng(9), traceless=True))
    w = wzcs.expm_field(y)
    a = gerbe.wz_amplitude(w, levels=2)
    b = gerbe.wz_amplitude(w @ c, levels=2)
    assert abs(np.angle(a.amplitude / b.amplitude)) <= a.error + b.error


@pytest.mark.parametrize("seed", [2, 6])
def test_oracle_gives_a_sign_on_symmetric_fields(seed):
    y = random_generator_field(64, seed, parity="odd")
    res = wzcs.wz_extension_oracle(y)
    assert min(abs(res.amplitude - 1), abs(res.amplitude + 1)) < 1e-6
    hol = gerbe.wz_amplitude(wzcs.expm_field(y[::2, ::2]) @ (1j * PAULI[1]), levels=2)
    assert abs(hol.amplitude - res.amplitude) <= max(hol.error, 1e-3)


# --- Chern-Simons ---------------------------------------------------------

@pytest.fixture(scope="module")
def dirac_connection():
    pf = valence_projectors(dirac_3d(-2.0), BZGrid.square(3, 16))
    return berry_connection(smooth_frame(pf))


def test_cs_gauge_shift_is_an_integer_multiple(dirac_connection):
    base = wzcs.cs_action(dirac_connection)
    shifted = wzcs.cs_action(wzcs.gauge_transform(dirac_connection, unit_quaternion_field(16, -2.0)))
    turns = (shifted.raw - base.raw) / (2 * np.pi)
    assert abs(turns - round(turns)) < 1e-2 and round(turns) != 0
    assert abs(np.angle(shifted.amplitude / base.amplitude)) < 1e-2


def test_cs_of_a_trivial_connection_is_zero():
    pf = valence_projectors(dirac_3d(4.0), BZGrid.square(3, 12))
    res = wzcs.cs_action(berry_connection(smooth_frame(pf)))
    assert abs(res.value) < 1e-3


def test_half_torus_identity_is_exact_on_symmetric_sewing():
    _, _, _, sf, _ = pipeline("dirac_3d", 16)
    res = wzcs.cs_via_half_torus(sf)
    assert res.factor_two_residual < 1e-10
    assert abs(abs(res.amplitude) - 1) < 1e-14


@pytest.mark.parametrize("m,sign", [(-1.0, -1), (-2.0, -1), (4.0, 1)])
def test_cs_matches_strong_fkm_sign(m, sign):
    rep = wzcs.prop2_check(dirac_3d(m), n=16, with_slices=False)
    assert rep.fkm_amplitude == sign
    assert rep.phase_distance_cs <= 5e-2 and rep.phase_distance_half <= 5e-2


def test_cs_of_a_weak_phase_is_trivial():
    rep = wzcs.prop2_check(build("layered_kane_mele", t_perp=0.1), n=12)
    assert rep.strong_index == 0 and rep.slice_index == 0
    assert rep.phase_distance_cs <= 5e-2
