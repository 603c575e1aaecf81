import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moire_lab.bloch import BlochHamiltonian, dirac_data, verify_dirac_cone
from moire_lab.geometry import A0_CC, make_lattice
from moire_lab.hopping import K_ABS, IntralayerModel

ORACLES = json.loads((Path(__file__).parent / "oracles" / "oracles.json").read_text())
K = np.array([K_ABS, 0.0])
SK = IntralayerModel()
NN = IntralayerModel(kind="nearest-neighbor")


@pytest.fixture(scope="module")
def bh():
    return BlochHamiltonian(SK)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_hermitian_with_equal_diagonals(bh, kx, ky):
    h = bh(np.array([kx, ky]))
    assert np.allclose(h, h.conj().T, atol=1e-13)
    assert h[0, 0] == pytest.approx(h[1, 1], abs=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(-3, 3), st.integers(-3, 3))
def test_reciprocal_shift_is_a_gauge(bh, kx, ky, n1, n2):
    s = bh.spec
    B = 2 * np.pi * np.linalg.inv(s.lattice_vectors).T
    G = n1 * B[0] + n2 * B[1]
    k = np.array([kx, ky])
    # h(k + G) = U h(k) U^dagger with U = diag(exp(-i G.tau_s))
    U = np.diag(np.exp(-1j * np.array([G @ np.asarray(s.tauA), G @ s.tauB])))
    assert np.allclose(bh(k + G), U @ bh(k) @ U.conj().T, atol=1e-11)


def test_lattice_sums_against_oracle():
    d = dirac_data(SK)
    o = ORACLES["intra_lattice_sums"]
    assert d.eshift == pytest.approx(o["mu_eV"], rel=1e-9)
    assert d.v == pytest.approx(o["v_eV_angstrom"], rel=1e-9)
    assert d.vd == pytest.approx(o["vd_eV_angstrom2"], rel=1e-9)
    assert abs(d.vo) == pytest.approx(abs(o["vo_eV_angstrom2"]), rel=1e-9)
    assert d.fd_rel_error < 1e-6
    assert d.diag_grad < 1e-8


def test_dirac_point_and_gradient(bh):
    assert abs(bh(K)[0, 1]) < 1e-10
    g = bh.gradient(K)
    assert np.abs(g[0, 0]).max() < 1e-8 and np.abs(g[1, 1]).max() < 1e-8
    # off-diagonal gradient is alpha (1, -i) up to the phase of alpha
    assert g[0, 1, 1] == pytest.approx(-1j * g[0, 1, 0], abs=1e-10)


def test_opposite_valley_velocity(bh):
    d = dirac_data(SK)
    assert abs(d.alphaPrime) == pytest.approx(d.v, rel=1e-10)
    assert d.alphaPrime == pytest.approx(-np.conj(d.alpha), abs=1e-9)


def test_hessian_pattern(bh):
    H = bh.hessian(K)
    d = dirac_data(SK)
    assert np.allclose(H[0, 0], d.alphaD * np.eye(2), atol=1e-10)
    assert np.allclose(H[1, 1], d.alphaD * np.eye(2), atol=1e-10)
    assert np.allclose(H[0, 1], d.alphaO * np.array([[1, 1j], [1j, -1]]), atol=1e-10)


def test_nearest_neighbor_velocity():
    d = dirac_data(NN)
    a = np.sqrt(3) * A0_CC
    assert d.v == pytest.approx(np.sqrt(3) / 2 * a * 2.7, rel=1e-12)
    assert d.eshift == pytest.approx(0.0, abs=1e-12)
    assert d.vd == pytest.approx(0.0, abs=1e-12)


def test_zero_hopping_gives_zero_matrix():
    z = IntralayerModel(Vpppi=0.0)
    h = BlochHamiltonian(z)
    assert np.all(h(K) == 0) and np.all(h(np.array([0.3, -0.1])) == 0)


def test_onsite_shifts_diagonal():
    with_onsite = BlochHamiltonian(IntralayerModel(include_onsite=True))
    k = np.array([0.4, 0.2])
    diff = with_onsite(k) - BlochHamiltonian(SK)(k)
    want = IntralayerModel().radial(0.0)
    assert np.allclose(diff, want * np.eye(2), atol=1e-10)


@pytest.mark.parametrize("model", [SK, NN], ids=["slater-koster", "nearest-neighbor"])
def test_dirac_cone(model):
    rep = verify_dirac_cone(model, K_ABS * np.array([0.005, 0.01, 0.02]))
    assert rep.hAB_at_K < 1e-10
    assert rep.diag_grad < 1e-8
    assert rep.slope_rel_error < 1e-3
    assert rep.covariance_residual < 1e-10
    assert rep.passed()


def test_cone_rejects_large_radius():
    with pytest.raises(ValueError):
        verify_dirac_cone(SK, [0.2 * K_ABS])


def test_other_lattice_constant_scales_velocity():
    s = make_lattice(a=2 * np.sqrt(3) * A0_CC)
    d = dirac_data(IntralayerModel(kind="nearest-neighbor", a0=2 * A0_CC), s)
    assert d.v == pytest.approx(2 * dirac_data(NN).v, rel=1e-12)
