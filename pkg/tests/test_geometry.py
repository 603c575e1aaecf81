import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moire_lab.geometry import (LatticeSpec, build_site_table, kpath, make_lattice,
                                moire_points, reciprocal_data, rot)

ORACLES = json.loads((Path(__file__).parent / "oracles" / "oracles.json").read_text())

thetas = st.floats(0.2, 5.0)
epsilons = st.floats(0.02, 0.3)


def test_sublattice_offset_fixed(spec):
    assert np.allclose(np.asarray(spec.tauA) - spec.tauB, [0.0, -spec.a / np.sqrt(3)], atol=1e-15)


@given(thetas, epsilons)
def test_twist_parametrization(theta_deg, eps):
    s = make_lattice(theta_deg=theta_deg, epsilon=eps)
    assert abs(2 * np.sin(s.theta / 2) - s.beta * s.epsilon) <= 1e-14 * 2 * np.sin(s.theta / 2)


def test_spec_rejects_bad_values():
    with pytest.raises(ValueError):
        LatticeSpec(a=-1.0)
    with pytest.raises(ValueError):
        LatticeSpec(epsilon=1.5)
    with pytest.raises(ValueError):
        LatticeSpec(theta=0.1, epsilon=0.05, beta=1.0)


@given(thetas, epsilons)
def test_reciprocal_invariants(theta_deg, eps):
    s = make_lattice(theta_deg=theta_deg, epsilon=eps)
    r = reciprocal_data(s)
    A = s.lattice_vectors
    B = np.array([r.b1, r.b2])
    assert np.allclose(B @ A.T, 2 * np.pi * np.eye(2), atol=1e-12)
    # the moire vectors span mutually reciprocal lattices: the pairing matrix is
    # integer and unimodular (its index order is not the dual one)
    P = r.bm @ r.am.T / (2 * np.pi)
    assert np.allclose(P, np.round(P), atol=1e-12)
    assert abs(round(np.linalg.det(np.round(P)))) == 1
    assert np.allclose(r.K1 - r.K2, r.sPhys[0], atol=1e-12)
    assert np.allclose(r.s[1], rot(2 * np.pi / 3) @ r.s[0], atol=1e-12)
    assert np.allclose(r.s[2], rot(2 * np.pi / 3) @ r.s[1], atol=1e-12)
    assert np.allclose(r.K1, rot(s.layer_angle(1)) @ r.K)


def test_dirac_point_and_moire_constant(rec, spec):
    assert np.linalg.norm(rec.K) == pytest.approx(ORACLES["K_abs_per_angstrom"], rel=1e-14)
    assert np.linalg.norm(rec.K) == pytest.approx(1.7028, abs=5e-3)
    assert np.linalg.norm(rec.am[0]) == pytest.approx(ORACLES["moire_constant_angstrom"], rel=1e-12)
    assert np.linalg.norm(rec.am[0]) == pytest.approx(134, abs=1)


def test_dirac_separation_near_quoted_value(rec):
    # the quoted 0.033 is approximate; the computed value is 2|K| sin(theta/2)
    assert rec.dK == pytest.approx(ORACLES["dK_per_angstrom"], rel=1e-12)
    assert rec.dK == pytest.approx(0.033, rel=0.10)


def test_shift_phases_on_moire_lattice(rec):
    s1 = rec.sPhys[0]
    for n1 in range(-5, 6):
        for n2 in range(-5, 6):
            v = n1 * rec.am[0] + n2 * rec.am[1]
            x = s1 @ v / (2 * np.pi / 3)
            assert abs(x - round(x)) < 1e-9


def test_site_count_matches_enumeration(spec):
    sites = build_site_table(spec, 86.60)
    assert len(sites) == ORACLES["site_count_R86.60"]
    assert len(sites) == pytest.approx(ORACLES["site_density_estimate_R86.60"], rel=0.01)


def test_sites_inside_disk_and_on_lattice():
    s = make_lattice(dshift=(0.4, -0.2))
    sites = build_site_table(s, 25.0)
    assert np.all(np.linalg.norm(sites.positions, axis=1) <= 25.0 + 1e-9)
    A = s.lattice_vectors
    for j in (1, 2):
        for sub in (0, 1):
            m = sites.mask(j, sub)
            tau = np.asarray(s.tauA) if sub == 0 else s.tauB
            back = sites.positions[m] @ rot(s.layer_angle(j))  # rotate by -theta_j/2
            back -= tau + (-1) ** j * np.asarray(s.dshift) / 2
            assert np.allclose(back, sites.cells[m] @ A, atol=1e-12)
            direct = (sites.cells[m] @ A + tau + (-1) ** j * np.asarray(s.dshift) / 2) @ rot(
                s.layer_angle(j)).T
            assert np.allclose(direct, sites.positions[m], atol=1e-12)


def test_site_ordering_deterministic(spec):
    a = build_site_table(spec, 20.0)
    b = build_site_table(spec, 20.0)
    assert np.array_equal(a.positions, b.positions)
    key = np.lexsort((a.cells[:, 1], a.cells[:, 0], a.sublattice, a.layer))
    assert np.array_equal(key, np.arange(len(a)))


def test_tiny_disk_exhaustive(spec):
    R = 1.5 * spec.a
    sites = build_site_table(spec, R)
    A = spec.lattice_vectors
    want = 0
    for j in (1, 2):
        for sub in (0, 1):
            for n1 in range(-6, 7):
                for n2 in range(-6, 7):
                    p = rot(spec.layer_angle(j)) @ (n1 * A[0] + n2 * A[1]
                                                    + (spec.tauA if sub == 0 else spec.tauB))
                    want += np.linalg.norm(p) <= R + 1e-9
    assert len(sites) == want


def test_untwisted_layers_coincide():
    s = LatticeSpec(theta=0.0, epsilon=0.05, beta=0.0)
    sites = build_site_table(s, 15.0)
    p1 = sites.positions[sites.layer == 1]
    p2 = sites.positions[sites.layer == 2]
    assert p1.shape == p2.shape
    assert np.allclose(p1, p2, atol=1e-12)


def test_small_radius_rejected(spec):
    with pytest.raises(ValueError):
        build_site_table(spec, 0.9 * spec.a)


def test_kpath_degenerate_and_linear(rec):
    P = np.array([0.1, 0.2])
    ks, arc = kpath([P, P], 3)
    assert ks.shape == (4, 2) and np.allclose(ks, P) and np.allclose(arc, 0)
    ks, arc = kpath([np.zeros(2), rec.bm[0]], 4)
    assert len(ks) == 5
    assert np.allclose(np.diff(ks, axis=0), rec.bm[0] / 4)
    with pytest.raises(ValueError):
        kpath([P], 3)


def test_kpath_arclength(rec):
    pts = moire_points(rec)
    seq = [pts["K"], pts["Gamma"], pts["M"], pts["K"]]
    ks, arc = kpath(seq, 10)
    want = sum(np.linalg.norm(q - p) for p, q in zip(seq[:-1], seq[1:]))
    assert arc[-1] == pytest.approx(want, rel=1e-12)
    assert np.all(np.diff(arc) >= 0)


@given(st.floats(10.0, 30.0), st.floats(-1, 1), st.floats(-1, 1))
def test_site_count_density(R, dx, dy):
    s = make_lattice(dshift=(dx, dy))
    n = len(build_site_table(s, R))
    density = 4 * np.pi * R ** 2 / s.cell_area
    assert abs(n - density) < 4 * 2 * np.pi * R / s.a + 20
