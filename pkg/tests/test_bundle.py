import numpy as np
import pytest

from helpers import pipeline
from z2gerbe import bundle as bd
from z2gerbe.models import BlochModel, TimeReversalOperator, bhz, haldane, kane_mele
from z2gerbe.numlin import dagger, haar_unitary

CONST = BlochModel(2, 4, (((0, 0), np.diag([-1.0, -1.0, 1.0, 1.0]).astype(complex)),),
                   TimeReversalOperator.standard(2), 0.0)


def test_grid_reflection_and_trim():
    g = bd.BZGrid((4, 6))
    pts = g.points
    assert np.allclose(np.mod(g.reflect(pts) + pts, 2 * np.pi), 0)
    assert g.trim_indices() == [(0, 0), (0, 3), (2, 0), (2, 3)]
    with pytest.raises(bd.BundleError):
        bd.BZGrid((5, 6))


def test_constant_projectors():
    pf = bd.valence_projectors(CONST, bd.BZGrid.square(2, 8))
    assert pf.rank == 2 and pf.gap == pytest.approx(2.0)
    assert np.allclose(pf.projectors, np.diag([1, 1, 0, 0]))
    assert bd.chern_number(pf)[0] == 0
    assert bd.wilson_loop_z2(pf) == 0


def test_constant_projectors_give_constant_frame():
    frame = bd.smooth_frame(bd.valence_projectors(CONST, bd.BZGrid.square(2, 8)))
    assert frame.smoothness < 1e-12
    conn = bd.berry_connection(frame)
    assert np.max(np.abs(conn.components)) < 1e-12


def test_kane_mele_projectors_are_time_reversal_covariant():
    _, pf, *_ = pipeline("kane_mele", 24)
    assert pf.rank == 2 and pf.gap > 0
    assert pf.trs_residual <= 1e-10


def test_gap_closing_is_reported():
    model = kane_mele(lambda_v=3 * np.sqrt(3) * 0.06)
    with pytest.raises(bd.GapClosingError, match="gap-closing"):
        bd.valence_projectors(model, bd.BZGrid.square(2, 24))


@pytest.mark.parametrize("name,params", [("kane_mele", ()), ("kane_mele", (("lambda_v", 0.5),)),
                                         ("bhz", ()), ("bhz", (("m", 1.0),))])
def test_time_reversal_bands_have_zero_chern_number(name, params):
    _, pf, *_ = pipeline(name, 24, params)
    c, resid = bd.chern_number(pf)
    assert c == 0 and resid <= 1e-6


def test_haldane_chern_band():
    pf = bd.valence_projectors(haldane(), bd.BZGrid.square(2, 48))
    c, _ = bd.chern_number(pf)
    assert abs(c) == 1
    with pytest.raises(bd.NotTrivializableError):
        bd.smooth_frame(pf)


def test_trivial_haldane_has_zero_chern_number():
    pf = bd.valence_projectors(haldane(mass=1.5), bd.BZGrid.square(2, 24))
    assert bd.chern_number(pf)[0] == 0


@pytest.mark.parametrize("n", [24, 48])
def test_smooth_frame_spans_valence_space(n):
    _, pf, frame, *_ = pipeline("kane_mele", n)
    e, v = frame.frames, pf.vectors
    assert np.max(np.linalg.norm(e - v @ (dagger(v) @ e), axis=(-2, -1))) <= 1e-10
    assert np.allclose(dagger(e) @ e, np.eye(2), atol=1e-10)
    assert frame.seam_mismatch <= 0.05


def test_frame_smoothness_scales_with_spacing():
    # first-order link metric: the ratio tends to 2 from below
    coarse = pipeline("kane_mele", 48)[2].smoothness
    fine = pipeline("kane_mele", 96)[2].smoothness
    assert coarse / fine >= 1.95


def test_smooth_frame_3d():
    _, pf, frame, *_ = pipeline("dirac_3d", 16)
    e, v = frame.frames, pf.vectors
    assert np.max(np.linalg.norm(e - v @ (dagger(v) @ e), axis=(-2, -1))) <= 1e-10
    assert frame.smoothness < 1.0


def test_connection_of_exponential_frame():
    grid = bd.BZGrid.square(2, 16)
    u = haar_unitary(2, np.random.default_rng(0))
    x = u @ np.diag([1j, -1j]) @ dagger(u)       # integer spectrum: e is periodic in k1
    e0 = np.linalg.qr(np.random.default_rng(1).standard_normal((4, 2)))[0].astype(complex)
    k1 = grid.points[..., 0]
    vals, vecs = np.linalg.eigh(-1j * x)
    rot = (vecs * np.exp(1j * k1[..., None, None] * vals)) @ dagger(vecs)
    frame = bd.FrameField(grid, e0 @ rot, 0.5, 0.0)
    conn = bd.berry_connection(frame)
    assert np.allclose(conn.components[..., 0, :, :], x, atol=1e-12)
    assert np.allclose(conn.components[..., 1, :, :], 0, atol=1e-12)


def test_kane_mele_connection_trace_has_no_flux():
    _, _, frame, *_ = pipeline("kane_mele", 48)
    a = bd.berry_connection(frame).components
    tr = np.trace(a, axis1=-2, axis2=-1)
    assert np.max(np.abs(tr.real)) < 1e-12
    h = frame.grid.steps
    flux = np.sum(np.gradient(tr[..., 1], h[0], axis=0) - np.gradient(tr[..., 0], h[1], axis=1))
    assert abs(flux * h[0] * h[1]) < 1e-8


def test_rough_frame_is_rejected():
    grid = bd.BZGrid.square(2, 4)
    frame = bd.FrameField(grid, np.zeros((4, 4, 4, 2), complex), 2.0, 0.0)
    with pytest.raises(bd.BundleError, match="rough"):
        bd.berry_connection(frame)


@pytest.mark.parametrize("name,params,expected", [
    ("kane_mele", (), 1), ("kane_mele", (("lambda_v", 0.4),), 0),
    ("kane_mele", (("lambda_r", 0.05),), 1), ("bhz", (("m", -1.0),), 1),
    ("bhz", (("m", 1.0),), 0), ("bhz", (("m", -6.0),), 1), ("bhz", (("m", -9.0),), 0)])
def test_wilson_loop_index(name, params, expected):
    _, pf, *_ = pipeline(name, 24, params)
    assert bd.wilson_loop_z2(pf) == expected


def test_bhz_gap_closes_at_zero_mass():
    with pytest.raises(bd.GapClosingError):
        bd.valence_projectors(bhz(m=0.0), bd.BZGrid.square(2, 24))
