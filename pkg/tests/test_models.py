import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from z2gerbe.models import (BlochModel, ModelError, TimeReversalOperator, bhz, build, check_trs,
                            dirac_3d, haldane, kane_mele, layered_3d, load_model, model_to_dict,
                            save_model)

K2 = st.tuples(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi))


def km_bands(k, t=1.0, lso=0.06, lv=0.0):
    """Closed-form Kane-Mele bands without Rashba coupling."""
    k1, k2 = k
    f2 = 3 + 2 * np.cos(k1) + 2 * np.cos(k2) + 2 * np.cos(k1 - k2)
    s = np.sin(k1) - np.sin(k2) + np.sin(k2 - k1)
    out = []
    for sign in (1, -1):
        e = np.sqrt(t * t * f2 + (lv + sign * 2 * lso * s) ** 2)
        out += [e, -e]
    return np.sort(out)


def test_onsite_only_is_constant():
    t0 = np.diag([1.0, -1.0, 2.0, -2.0]).astype(complex)
    m = BlochModel(2, 4, (((0, 0), t0),), TimeReversalOperator.standard(2))
    assert np.allclose(m.evaluate([0.3, -1.2]), t0)


def test_single_hopping_closed_form():
    tr = np.arange(4).reshape(2, 2) + 1j
    m = BlochModel(2, 2, (((1, 0), tr), ((-1, 0), tr.conj().T)), None)
    k = np.array([0.7, 0.1])
    expect = np.exp(1j * k[0]) * tr + np.exp(-1j * k[0]) * tr.conj().T
    assert np.allclose(m.evaluate(k), expect)


@settings(max_examples=30, deadline=None)
@given(K2, st.floats(0.0, 0.5))
def test_kane_mele_bands_match_closed_form(k, lv):
    h = kane_mele(lambda_v=lv).evaluate(np.array(k))
    assert np.allclose(np.linalg.eigvalsh(h), km_bands(k, lv=lv), atol=1e-12)


def test_kane_mele_gap_at_k_point_closes_at_transition():
    kk = np.array([2 * np.pi / 3, -2 * np.pi / 3])
    lv = 3 * np.sqrt(3) * 0.06
    e = np.linalg.eigvalsh(kane_mele(lambda_v=lv).evaluate(kk))
    assert e[2] - e[1] < 1e-12


@settings(max_examples=30, deadline=None)
@given(K2, st.floats(-3, 3))
def test_bhz_bands(k, m):
    k1, k2 = k
    e = np.linalg.eigvalsh(bhz(m=m, d_param=0.2).evaluate(np.array(k)))
    mk = m + 2 * (2 - np.cos(k1) - np.cos(k2))
    eps = 0.4 - 0.2 * (np.cos(k1) + np.cos(k2))
    r = np.sqrt(np.sin(k1) ** 2 + np.sin(k2) ** 2 + mk**2)
    assert np.allclose(e, eps + np.array([-r, -r, r, r]), atol=1e-12)


def test_dirac_3d_bands():
    k = np.array([0.4, -1.1, 2.0])
    e = np.linalg.eigvalsh(dirac_3d(m=-1.0).evaluate(k))
    mk = -1 + 2 * np.sum(1 - np.cos(k))
    r = np.sqrt(np.sum(np.sin(k) ** 2) + mk**2)
    assert np.allclose(e, [-r, -r, r, r], atol=1e-12)


@pytest.mark.parametrize("model", [kane_mele(), kane_mele(lambda_r=0.05, lambda_v=0.1), bhz(),
                                   dirac_3d(), layered_3d(bhz(), 0.3)])
def test_builtins_are_time_reversal_invariant(model):
    k = np.random.default_rng(0).uniform(-np.pi, np.pi, (50, model.d))
    assert check_trs(model, k)["max_violation"] <= 1e-12


def test_zeeman_term_is_detected():
    k = np.random.default_rng(1).uniform(-np.pi, np.pi, (20, 2))
    rep = check_trs(kane_mele(zeeman=0.2), k)
    assert rep["max_violation"] > 0.1 and not rep["time_reversal_invariant"]


def test_identity_hamiltonian_has_no_violation():
    m = BlochModel(2, 2, (((0, 0), np.eye(2)),), TimeReversalOperator.standard(1), 0.5)
    assert check_trs(m, [[0.1, 0.2]])["max_violation"] == 0


def test_haldane_has_no_time_reversal():
    with pytest.raises(ModelError):
        check_trs(haldane(), [[0.0, 0.0]])


def test_conjugate_hopping_is_enforced():
    tr = np.eye(2, dtype=complex)
    with pytest.raises(ModelError, match="dagger"):
        BlochModel(2, 2, (((1, 0), tr), ((-1, 0), 2 * tr)), None)


def test_even_time_reversal_is_rejected():
    with pytest.raises(ModelError, match="even time reversal"):
        TimeReversalOperator(np.eye(2))


def test_layered_model_adds_cosine():
    base = kane_mele()
    m = layered_3d(base, 0.2)
    k = np.array([0.3, 0.5, 1.0])
    assert np.allclose(m.evaluate(k), base.evaluate(k[:2]) + 0.2 * np.cos(1.0) * np.eye(4))
    assert build("layered_kane_mele", t_perp=0.2).d == 3


def test_round_trip(tmp_path):
    m = kane_mele(lambda_r=0.05)
    path = tmp_path / "km.json"
    save_model(m, path)
    back = load_model(path)
    k = np.random.default_rng(2).uniform(-np.pi, np.pi, (10, 2))
    assert np.allclose(back.evaluate(k), m.evaluate(k), atol=0)
    assert back.fermi == m.fermi


def test_file_with_inconsistent_conjugate_is_rejected(tmp_path):
    data = model_to_dict(bhz())
    hop = data["hoppings"][-1]
    data["hoppings"].append({"R": [-x for x in hop["R"]], "T": hop["T"]})
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ModelError, match="dagger"):
        load_model(path)


def test_file_with_even_theta_is_rejected(tmp_path):
    data = model_to_dict(bhz())
    data["theta"] = [[1.0, 0.0] if i % 5 == 0 else [0.0, 0.0] for i in range(16)]
    path = tmp_path / "even.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ModelError, match="even time reversal"):
        load_model(path)


def test_unknown_builtin():
    with pytest.raises(ModelError, match="unknown model"):
        build("graphene")
