import numpy as np
import pytest
from hypothesis import given, strategies as st

import moire_lab.continuum as C
from moire_lab.geometry import build_site_table, moire_points, reciprocal_data, rot
from moire_lab.wavepacket import (ErrorSeries, PacketSpec, TBState, auto_supercell, band_index,
                                  beta_calibrated, continuum_setup, epsilon_sweep, fit_slope,
                                  group_velocity, interpolate, make_initial, relative_error,
                                  sample_to_lattice, spectral_concentration)


@pytest.fixture(scope="module")
def basis(params):
    return C.make_basis(params, 3 * np.linalg.norm(params.bm[0]))


@pytest.fixture(scope="module")
def gamma(rec):
    return tuple(moire_points(rec)["Gamma"])


def test_packet_spec_validation():
    with pytest.raises(ValueError):
        PacketSpec(sigma_r=0.0)
    with pytest.raises(ValueError):
        PacketSpec(margin=-1.0)
    PacketSpec(sigma_r=20.0, margin=0.0).check_fits(86.6)
    with pytest.raises(ValueError):
        PacketSpec(sigma_r=20.0, margin=10.0).check_fits(86.6)


def test_band_index(basis):
    n = len(basis.G)
    assert band_index(basis, 0) == 2 * n
    assert band_index(basis, -1) == 2 * n - 1
    with pytest.raises(ValueError):
        band_index(basis, 2 * n)


def test_initial_packet_normalized(params, basis, gamma):
    f = make_initial(PacketSpec(k0=gamma, sigma_r=20.0), params, basis, N=(45, 45))
    assert f.norm() == pytest.approx(1.0, rel=1e-12)
    assert f.meta["eigvec_order"] == "1"


def test_spectral_concentration_grows_with_width(params, basis, gamma):
    conc = [spectral_concentration(make_initial(PacketSpec(k0=gamma, sigma_r=sigma), params, basis),
                                   gamma, basis, 0.1) for sigma in (5.0, 10.0, 20.0)]
    assert conc[0] < conc[1] < conc[2]
    assert conc[2] > 0.999
    zero = C.zero_field(params, N=(27, 27))
    assert spectral_concentration(zero, gamma, basis, 0.01) == 1.0


def test_wide_packet_approaches_bloch_state(params, basis, gamma):
    n = band_index(basis, 0)
    phi, _ = C.eigenpacket(gamma, n, params, "1", basis, N=(45, 45))
    f = make_initial(PacketSpec(k0=gamma, sigma_r=1e6), params, basis, N=(45, 45))
    assert abs(abs(phi.inner(f)) - 1) < 1e-8


def test_interpolate_simple_fields(params, rng):
    L = C.supercell_vectors(params, 3, 3)
    N = (15, 15)
    x = rng.uniform(-100, 100, size=(20, 2))
    zero = C.FieldGrid(np.zeros((4,) + N, complex), L)
    assert np.all(interpolate(zero, x) == 0)
    const = C.FieldGrid(np.ones((4,) + N, complex) * (2 - 1j), L)
    assert np.allclose(interpolate(const, x), 2 - 1j, atol=1e-13)


@given(st.integers(-7, 7), st.integers(-7, 7))
def test_interpolate_single_mode_exact(params, n1, n2):
    L = C.supercell_vectors(params, 3, 3)
    N = (15, 15)
    B = 2 * np.pi * np.linalg.inv(L).T
    q = n1 * B[0] + n2 * B[1]
    _, _, X = C.grid_coords(L, *N)
    f = C.FieldGrid(np.broadcast_to(np.exp(1j * X @ q), (4,) + N).copy(), L)
    x = np.array([[3.3, -17.1], [55.0, 12.5], [-80.2, 40.0]])
    assert np.allclose(interpolate(f, x), np.exp(1j * x @ q)[None, :], atol=1e-11)


def test_refinement_leaves_samples_unchanged(params, basis, gamma, spec):
    f = make_initial(PacketSpec(k0=gamma, sigma_r=20.0), params, basis, N=(81, 81))
    g = make_initial(PacketSpec(k0=gamma, sigma_r=20.0), params, basis, N=(163, 163))
    sites = build_site_table(spec, 30.0)
    a = sample_to_lattice(f, sites, params).psi
    b = sample_to_lattice(g, sites, params).psi
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-6


def test_sampling_phases_and_scale(params, spec):
    L = C.supercell_vectors(params, 3, 3)
    N = (15, 15)
    f = C.FieldGrid(np.ones((4,) + N, complex), L)
    sites = build_site_table(spec, 12.0)
    psi = sample_to_lattice(f, sites, params, T=0.0).psi
    K = reciprocal_data(spec).K
    for j in (1, 2):
        m = sites.layer == j
        Kj = rot(spec.layer_angle(j)) @ K
        assert np.allclose(psi[m], params.epsilon * np.exp(1j * sites.positions[m] @ Kj), atol=1e-12)
    # regression: the unrotated valley momentum is measurably different
    bad = sample_to_lattice(f, sites, params, rotate_K=False).psi
    assert np.linalg.norm(bad - psi) > 1e-3 * np.linalg.norm(psi)
    # the Dirac energy enters as a global phase
    later = sample_to_lattice(f, sites, params, T=2.0).psi
    assert np.allclose(later, np.exp(-2j * params.eshift) * psi, atol=1e-12)


def test_sampling_outside_supercell_rejected(params, spec):
    L = C.supercell_vectors(params, 3, 3)
    f = C.FieldGrid(np.ones((4, 9, 9), complex), L)
    with pytest.raises(ValueError):
        sample_to_lattice(f, build_site_table(spec, 300.0), params)


def test_relative_error_values(spec, rng):
    sites = build_site_table(spec, 6.0)
    psi = rng.normal(size=len(sites)) + 1j * rng.normal(size=len(sites))
    ref = TBState(psi, sites)
    assert relative_error(TBState(psi.copy(), sites), ref) == 0.0
    assert relative_error(TBState(np.zeros_like(psi), sites), ref) == pytest.approx(1.0)
    assert relative_error(TBState(-psi, sites), ref) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        relative_error(ref, TBState(np.zeros_like(psi), sites))
    with pytest.raises(ValueError):
        relative_error(TBState(psi[:-1], sites), ref)


def test_error_series_validation():
    es = ErrorSeries([1.0], [0.1], [0.01], {"1+nnn": [0.09]})
    es.check()
    assert list(es.columns()) == ["time_hbar_per_eV", "eta1_rel", "eta2_rel", "eta_1_plus_nnn_rel"]
    with pytest.raises(ValueError):
        ErrorSeries([1.0], [2.5], [0.1]).check()


@given(st.floats(0.5, 4.0), st.floats(1e-3, 10.0))
def test_fit_slope_recovers_power_law(p, c):
    eps = np.array([0.05, 0.075, 0.1, 0.125, 0.15, 0.175])
    slope, resid = fit_slope(eps, c * eps ** p)
    assert slope == pytest.approx(p, abs=1e-10)
    assert resid < 1e-10


def test_sweep_rejects_bad_lists():
    with pytest.raises(ValueError):
        epsilon_sweep([0.05, 0.1, 0.15])
    with pytest.raises(ValueError):
        epsilon_sweep([0.04, 0.1, 0.15, 0.17])
    with pytest.raises(ValueError):
        epsilon_sweep([0.05, 0.1, 0.15, 0.2])


def test_group_velocity_dirac_limit(params):
    p = params.scaled(w1=0.0, w2=0.0, w1prime=0.0)
    basis = C.make_basis(p, 2 * np.linalg.norm(p.bm[0]))
    k0 = np.array([0.004, 0.003])
    g = group_velocity(k0, band_index(basis, 0), p, "1", basis)
    assert np.allclose(g, p.v * k0 / np.linalg.norm(k0), rtol=1e-3)


def test_group_velocity_rotation_covariance(params):
    basis = C.make_basis(params, 6 * np.linalg.norm(params.bm[0]))
    k0 = 0.3 * params.sPhys[0] + np.array([0.002, 0.0])
    R3 = rot(2 * np.pi / 3)
    n = band_index(basis, 1)
    g0 = group_velocity(k0, n, params, "1", basis)
    g1 = group_velocity(R3 @ k0, n, params, "1", basis)
    assert np.allclose(g1, R3 @ g0, rtol=1e-4, atol=1e-4 * np.linalg.norm(g0))


def test_group_velocity_rejects_degenerate_point(params):
    # the two middle bands touch at the moire K point (exactly once the basis converges)
    basis = C.make_basis(params, 6 * np.linalg.norm(params.bm[0]))
    with pytest.raises(ValueError):
        group_velocity([0.0, 0.0], band_index(basis, 0), params, "1", basis)


def test_auto_supercell_rule(params):
    M, N = auto_supercell(params, 86.6, margin=10.0)
    assert M == (3, 3) and N == (81, 81)
    M, N = auto_supercell(params, 500.0)
    assert M[0] % 3 == 0 and N[0] % 2 == 1 and M[0] > 3


def test_continuum_setup_defaults():
    cs = continuum_setup(0.05, G_shells=2.0, grid=(45, 45), supercell=(3, 3))
    assert cs.packet.sigma_r == pytest.approx(20.0)
    assert cs.packet.margin == 0.0
    assert np.rad2deg(cs.spec.theta) == pytest.approx(1.05, rel=1e-12)
    assert cs.inter.ell == pytest.approx(3.5, rel=1e-12)
    assert beta_calibrated() * 0.05 == pytest.approx(2 * np.sin(np.deg2rad(1.05) / 2))
    assert cs.f0.norm() == pytest.approx(1.0)
