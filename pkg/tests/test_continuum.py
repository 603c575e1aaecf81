import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

import moire_lab.continuum as C
from moire_lab.geometry import moire_points
from moire_lab.symmetry import _random_field

ORACLES = json.loads((Path(__file__).parent / "oracles" / "oracles.json").read_text())


@pytest.fixture(scope="module")
def basis(params):
    return C.make_basis(params, 4 * np.linalg.norm(params.bm[0]))


@pytest.fixture(scope="module")
def vk(params):
    return params.v * np.linalg.norm(params.sPhys[0])


def test_parse_order():
    assert C.parse_order("1") == frozenset()
    assert C.parse_order("2") == frozenset(C.TERMS)
    assert C.parse_order("2-minus-grad") == {"nnn", "h2"}
    assert C.parse_order("1+nnn+h2") == {"nnn", "h2"}
    for bad in ("3", "1+foo", "2-minus-bar", ""):
        with pytest.raises(ValueError):
            C.parse_order(bad)


@pytest.mark.parametrize("order", ["1", "2", "1+grad", "1+h2", "1+nnn"])
@given(kx=st.floats(-0.05, 0.05), ky=st.floats(-0.05, 0.05))
def test_plane_wave_matrix_hermitian(params, basis, order, kx, ky):
    H = C.build_bm_matrix([kx, ky], params, order, basis)
    assert np.abs(H - H.conj().T).max() < 1e-14


def test_decoupled_layers_are_dirac_cones(params, basis):
    p = params.scaled(w1=0.0, w2=0.0, w1prime=0.0)
    k = np.array([0.003, -0.001])
    w = np.linalg.eigvalsh(C.build_bm_matrix(k, p, "1", basis, shift=False))
    q = np.concatenate([np.linalg.norm(k + basis.G, axis=1),
                        np.linalg.norm(k + basis.G + basis.s1, axis=1)])
    want = np.sort(np.concatenate([q, -q]) * p.v)
    assert np.allclose(w, want, atol=1e-12)


def test_energy_shift_is_global(params, basis):
    k = np.array([0.002, 0.001])
    a = np.linalg.eigvalsh(C.build_bm_matrix(k, params, "2", basis))
    b = np.linalg.eigvalsh(C.build_bm_matrix(k, params, "2", basis, shift=False))
    assert np.allclose(a - b, params.eshift, atol=1e-12)


def _middle(w, i=0):
    return w[len(w) // 2 + i]


@pytest.mark.parametrize("ratio", [0.05, 0.1])
def test_velocity_renormalization(params, basis, vk, ratio):
    # perturbative Fermi-velocity ratio (1 - 3 a^2)/(1 + 6 a^2), a = w1/(v k_theta);
    # higher-order corrections grow like a^4
    p = params.scaled(w1=ratio * vk)
    dk = 1e-4 * np.linalg.norm(params.sPhys[0])
    e0 = _middle(np.linalg.eigvalsh(C.build_bm_matrix([0, 0], p, "1", basis, shift=False)))
    e1 = _middle(np.linalg.eigvalsh(C.build_bm_matrix([dk, 0], p, "1", basis, shift=False)))
    want = ORACLES["velocity_ratio"][str(ratio)]
    assert abs(e1 - e0) / dk / p.v == pytest.approx(want, abs=0.5 * (10 * ratio) ** 4 * 5e-3)


def test_chiral_magic_angle(params, vk, monkeypatch):
    # with only sublattice-off-diagonal coupling the middle bands become exactly
    # flat at the first magic ratio, which is a known independent reference
    W = C.W
    monkeypatch.setattr(C, "TMATS", (np.array([[0, 1], [1, 0]], complex),
                                     np.array([[0, np.conj(W)], [W, 0]]),
                                     np.array([[0, W], [np.conj(W), 0]])))
    basis = C.make_basis(params, 6 * np.linalg.norm(params.bm[0]))
    pts = moire_points_from(params)

    def flatness(alpha):
        p = params.scaled(w1=alpha * vk)
        return max(abs(_middle(np.linalg.eigvalsh(C.build_bm_matrix(pts[n], p, "1", basis,
                                                                     shift=False)))) / vk
                   for n in ("Gamma", "M"))

    at_magic = flatness(ORACLES["chiral_magic_alpha"])
    assert at_magic < 1e-3
    assert flatness(0.55) > 20 * at_magic
    assert flatness(0.62) > 20 * at_magic


def moire_points_from(params):
    from types import SimpleNamespace
    return moire_points(SimpleNamespace(sPhys=params.sPhys, bm=params.bm))


def test_particle_hole_symmetry_of_first_order(params, basis):
    # the first-order spectrum is symmetric about the Dirac energy at Gamma_m and M_m;
    # the plane-wave cutoff is not mapped onto itself, so equality holds up to truncation
    pts = moire_points_from(params)
    for name in ("Gamma", "M"):
        w1 = np.linalg.eigvalsh(C.build_bm_matrix(pts[name], params, "1", basis, shift=False))
        mid1 = w1[len(w1) // 2 - 4:len(w1) // 2 + 4]
        assert np.allclose(mid1, -mid1[::-1], atol=1e-6)
    w2 = np.linalg.eigvalsh(C.build_bm_matrix(pts["Gamma"], params, "2", basis, shift=False))
    mid2 = w2[len(w2) // 2 - 4:len(w2) // 2 + 4]
    assert np.abs(mid2 + mid2[::-1]).max() > 1e-3


def test_band_structure_convergence_flag(params):
    pts = moire_points_from(params)
    path = np.array([pts["K"], pts["Gamma"]])
    coarse = C.band_structure(path, params, "1", 1.2 * np.linalg.norm(params.bm[0]))
    fine = C.band_structure(path, params, "1", 5 * np.linalg.norm(params.bm[0]))
    assert fine.converged and fine.convergence_shift < 1e-4
    assert not coarse.converged
    assert fine.residual < 1e-12


def test_supercell_rules(params):
    with pytest.raises(ValueError):
        C.supercell_vectors(params, 2, 3)
    with pytest.raises(ValueError):
        C.GridOperator(params, "1", C.supercell_vectors(params, 3, 3), (26, 27))


@pytest.fixture(scope="module")
def grid(params):
    L = C.supercell_vectors(params, 3, 3)
    return L, (27, 27)


@pytest.mark.parametrize("order", ["1", "2"])
def test_grid_operator_hermitian(params, grid, order, rng):
    L, N = grid
    op = C.GridOperator(params, order, L, N)
    f = rng.normal(size=(4,) + N) + 1j * rng.normal(size=(4,) + N)
    g = rng.normal(size=(4,) + N) + 1j * rng.normal(size=(4,) + N)
    lhs = np.vdot(g, op(f))
    rhs = np.vdot(op(g), f)
    assert abs(lhs - rhs) < 1e-12 * np.linalg.norm(f) * np.linalg.norm(g) * op.norm_estimate()


@pytest.mark.parametrize("order", ["1", "2"])
def test_grid_operator_agrees_with_plane_waves(params, order):
    # inside the plane-wave basis both representations share matrix elements
    basis = C.make_basis(params, 3 * np.linalg.norm(params.bm[0]))
    pts = moire_points_from(params)
    n = basis.size // 2
    f, E = C.eigenpacket(pts["Gamma"], n, params, order, basis, N=(45, 45))
    g, E2 = C.eigenpacket(pts["Gamma"], n + 1, params, order, basis, N=(45, 45))
    op = C.GridOperator(params, order, f.L, f.N)
    Hf = f.copy(data=op(f.data))
    assert f.inner(Hf).real == pytest.approx(E - params.eshift, abs=1e-12)
    assert abs(f.inner(Hf).imag) < 1e-13
    assert abs(g.inner(Hf)) < 1e-12


def test_zero_hamiltonian_evolution(params, grid, rng):
    L, N = grid
    p = params.scaled(alpha=0.0, vd=0.0, vo=0.0, w1=0.0, w2=0.0, w1prime=0.0)
    f = C.FieldGrid(_random_field(rng, N, L), L)
    for method in ("rk4", "krylov"):
        out = C.evolve(f, p, "2", dt=1.0, T=5.0, method=method)
        assert np.allclose(out[-1][1].data, f.data, atol=1e-14)


def test_stationary_state_phase(params, grid):
    # without interlayer coupling a single plane wave times a symbol eigenvector is exact
    L, N = grid
    p = params.scaled(w1=0.0, w2=0.0, w1prime=0.0)
    op = C.GridOperator(p, "2", L, N)
    i, j = 2, 5
    h = C.intra_block(op.px[i, j], op.py[i, j], p, 1, C.parse_order("2"))
    E, V = np.linalg.eigh(h)
    F = np.zeros((4,) + N, complex)
    F[0, i, j], F[1, i, j] = V[:, 1]
    f = C.FieldGrid(np.fft.ifft2(F, axes=(1, 2)), L)
    T = 10.0
    out = C.evolve(f, p, "2", dt=2.0, T=T, method="krylov", op=op)[-1][1]
    assert np.linalg.norm(out.data - np.exp(-1j * E[1] * T) * f.data) < 1e-10 * np.linalg.norm(f.data)


def test_rk4_and_krylov_agree_and_conserve_norm(params, grid, rng):
    L, N = grid
    f = C.FieldGrid(_random_field(rng, N, L), L)
    f.data /= f.norm()
    op = C.GridOperator(params, "2", L, N)
    dt = 0.2 / op.norm_estimate()
    a = C.evolve(f, params, "2", dt=dt, T=1.0, method="rk4", op=op)[-1][1]
    b = C.evolve(f, params, "2", dt=0.5, T=1.0, method="krylov", op=op)[-1][1]
    assert abs(a.norm() - 1) < 1e-6 and abs(b.norm() - 1) < 1e-9
    assert (a.copy(data=a.data - b.data)).norm() < 1e-6
    with pytest.raises(ValueError):
        C.evolve(f, params, "2", dt=10 * dt, T=1.0, method="rk4", op=op)


def test_multiscale_zero_weights_reduce_to_first_order(params, grid, rng):
    L, N = grid
    f = C.FieldGrid(_random_field(rng, N, L), L)
    op = C.GridOperator(params, "1", L, N)
    dt = 0.2 / op.norm_estimate()
    res = C.multiscale_evolve(f, params, dt, 0.5, weights=(0.0, 0.0, 0.0))
    direct = C.evolve(f, params, "1", dt=dt, T=0.5, method="rk4", op=op)[-1][1]
    assert np.allclose(res.combined[-1].data, direct.data, atol=1e-12)
    for part in (res.fnnn, res.fgrad, res.f2):
        assert np.all(part[-1].data == 0)
    assert np.all(C.multiscale_residual(res) == 0)


def test_multiscale_without_corrections_has_no_forcing(params, grid, rng):
    L, N = grid
    p = params.scaled(w2=0.0, w1prime=0.0, vd=0.0, vo=0.0, theta=0.0)
    f = C.FieldGrid(_random_field(rng, N, L), L)
    dt = 0.2 / C.GridOperator(p, "1", L, N).norm_estimate()
    res = C.multiscale_evolve(f, p, dt, 0.3)
    assert max(np.abs(x[-1].data).max() for x in (res.fnnn, res.fgrad, res.f2)) < 1e-14


def test_aliasing_guard(params, grid):
    L, N = grid
    data = np.zeros((4,) + N, complex)
    data[0, 0, N[1] // 2] = 1.0
    f = C.FieldGrid(np.fft.ifft2(data, axes=(1, 2)), L)
    with pytest.raises(C.NumericalFailure):
        C.apply_H(f, params, "1", alias_tol=1e-6)


def test_eigenpacket_band_range(params):
    basis = C.make_basis(params, 2 * np.linalg.norm(params.bm[0]))
    with pytest.raises(ValueError):
        C.eigenpacket([0, 0], basis.size, params, "1", basis, N=(27, 27))
