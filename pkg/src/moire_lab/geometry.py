"""Monolayer and twisted-bilayer lattice geometry, moire lattice and site tables."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SQ3 = np.sqrt(3.0)
A0_CC = 1.42  # carbon-carbon distance (Angstrom)
A_GRAPHENE = SQ3 * A0_CC  # lattice constant (Angstrom)


def rot(phi: float) -> np.ndarray:
    """Counter-clockwise rotation matrix by angle phi."""
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class LatticeSpec:
    a: float = A_GRAPHENE
    tauA: tuple = (A_GRAPHENE / 2, -A_GRAPHENE / (2 * SQ3))
    dshift: tuple = (0.0, 0.0)
    theta: float = np.deg2rad(1.05)
    epsilon: float = 0.05
    beta: float = field(default=None)

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("lattice constant must be positive")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        beta = self.beta
        if beta is None:
            beta = 2 * np.sin(self.theta / 2) / self.epsilon
            object.__setattr__(self, "beta", float(beta))
        lhs, rhs = 2 * np.sin(self.theta / 2), beta * self.epsilon
        if abs(lhs - rhs) > 1e-14 * abs(lhs):
            raise ValueError("2 sin(theta/2) must equal beta*epsilon")
        object.__setattr__(self, "tauA", tuple(float(x) for x in self.tauA))
        object.__setattr__(self, "dshift", tuple(float(x) for x in self.dshift))

    @property
    def tauB(self) -> np.ndarray:
        return np.asarray(self.tauA) + np.array([0.0, self.a / SQ3])

    @property
    def tau_AB(self) -> np.ndarray:
        """tau^A - tau^B."""
        return np.array([0.0, -self.a / SQ3])

    @property
    def lattice_vectors(self) -> np.ndarray:
        """Rows a1, a2."""
        a = self.a
        return np.array([[a / 2, SQ3 * a / 2], [-a / 2, SQ3 * a / 2]])

    @property
    def cell_area(self) -> float:
        return SQ3 / 2 * self.a ** 2

    def layer_angle(self, j: int) -> float:
        """Rotation angle theta_j / 2 applied to layer j (theta_j = (-1)^j theta)."""
        return (-1) ** j * self.theta / 2

    def tau_layer(self, j: int, sub: int) -> np.ndarray:
        """Sublattice offset tau_j^sigma of layer j, sublattice 0 (A) or 1 (B)."""
        tau = np.asarray(self.tauA) if sub == 0 else self.tauB
        return rot(self.layer_angle(j)) @ (tau + (-1) ** j * np.asarray(self.dshift) / 2)

    def replace(self, **kw) -> "LatticeSpec":
        d = dict(a=self.a, tauA=self.tauA, dshift=self.dshift, theta=self.theta,
                 epsilon=self.epsilon, beta=None)
        d.update(kw)
        if "beta" not in kw and ("theta" in kw or "epsilon" in kw):
            d["beta"] = None
        return LatticeSpec(**d)


def make_lattice(theta_deg: float = 1.05, epsilon: float = 0.05, a: float = A_GRAPHENE,
                 tauA=None, dshift=(0.0, 0.0)) -> LatticeSpec:
    if tauA is None:
        tauA = (a / 2, -a / (2 * SQ3))
    return LatticeSpec(a=a, tauA=tuple(tauA), dshift=tuple(dshift),
                       theta=np.deg2rad(theta_deg), epsilon=epsilon)


@dataclass(frozen=True)
class ReciprocalData:
    b1: np.ndarray
    b2: np.ndarray
    K: np.ndarray
    Kprime: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    s: np.ndarray       # rows s_1, s_2, s_3 (dimensionless model)
    sPhys: np.ndarray   # rows epsilon * s_n (1/Angstrom)
    am: np.ndarray      # rows a_m1, a_m2 (Angstrom)
    bm: np.ndarray      # rows b_m1, b_m2 (1/Angstrom)
    cell_area: float

    s1 = property(lambda self: self.s[0])
    s2 = property(lambda self: self.s[1])
    s3 = property(lambda self: self.s[2])
    am1 = property(lambda self: self.am[0])
    am2 = property(lambda self: self.am[1])
    bm1 = property(lambda self: self.bm[0])
    bm2 = property(lambda self: self.bm[1])

    @property
    def dK(self) -> float:
        return float(np.linalg.norm(self.K1 - self.K2))


def reciprocal_data(spec: LatticeSpec) -> ReciprocalData:
    a, beta, eps = spec.a, spec.beta, spec.epsilon
    c = 4 * np.pi / (SQ3 * a)
    b1 = c * np.array([SQ3 / 2, 0.5])
    b2 = c * np.array([-SQ3 / 2, 0.5])
    K = 4 * np.pi / (3 * a) * np.array([1.0, 0.0])
    K1 = rot(spec.layer_angle(1)) @ K
    K2 = rot(spec.layer_angle(2)) @ K
    s1 = 4 * np.pi * beta / (3 * a) * np.array([0.0, -1.0])
    s = np.array([s1, rot(2 * np.pi / 3) @ s1, rot(4 * np.pi / 3) @ s1])
    L = a / (beta * eps)
    am = L * np.array([[SQ3 / 2, 0.5], [-SQ3 / 2, 0.5]])
    cb = 4 * np.pi * beta * eps / (SQ3 * a)
    bm = cb * np.array([[0.5, -SQ3 / 2], [0.5, SQ3 / 2]])
    return ReciprocalData(b1=b1, b2=b2, K=K, Kprime=-K, K1=K1, K2=K2, s=s, sPhys=eps * s,
                          am=am, bm=bm, cell_area=spec.cell_area)


def moire_points(rec: ReciprocalData) -> dict:
    """Moire high-symmetry momenta in the plane-wave convention where layer 1
    sits at k + G and layer 2 at k + G + s_1 (physical units)."""
    s1, _, s3 = rec.sPhys
    Km = np.zeros(2)
    Kpm = -s3
    return {"K": Km, "Gamma": s1.copy(), "M": 0.5 * (Km + Kpm), "Kprime": Kpm}


@dataclass(frozen=True)
class SiteTable:
    positions: np.ndarray   # (N, 2) Angstrom
    layer: np.ndarray       # (N,) values 1 or 2
    sublattice: np.ndarray  # (N,) 0 = A, 1 = B
    cells: np.ndarray       # (N, 2) integer (n1, n2)
    R: float
    spec: LatticeSpec

    def __len__(self) -> int:
        return len(self.positions)

    def mask(self, layer=None, sub=None) -> np.ndarray:
        m = np.ones(len(self), bool)
        if layer is not None:
            m &= self.layer == layer
        if sub is not None:
            m &= self.sublattice == sub
        return m


def _disk_sites(spec: LatticeSpec, j: int, sub: int, R: float, center=(0.0, 0.0)):
    A = spec.lattice_vectors.T  # columns a1, a2
    Rj = rot(spec.layer_angle(j))
    tau = spec.tau_layer(j, sub)
    c = np.asarray(center, float)
    # box of cell indices that can reach the disk
    Ainv = np.linalg.inv(Rj @ A)
    nc = Ainv @ (c - tau)
    span = np.abs(Ainv).sum(axis=1) * R + 2
    r1 = np.arange(int(np.floor(nc[0] - span[0])), int(np.ceil(nc[0] + span[0])) + 1)
    r2 = np.arange(int(np.floor(nc[1] - span[1])), int(np.ceil(nc[1] + span[1])) + 1)
    n1, n2 = np.meshgrid(r1, r2, indexing="ij")
    cells = np.stack([n1.ravel(), n2.ravel()], axis=1)
    pos = cells @ (Rj @ A).T + tau
    keep = np.linalg.norm(pos - c, axis=1) <= R + 1e-9
    return pos[keep], cells[keep]


def build_site_table(spec: LatticeSpec, R: float) -> SiteTable:
    """All sites of both layers inside the closed disk of radius R at the origin,
    ordered by (layer, sublattice, n1, n2)."""
    if not R > spec.a:
        raise ValueError(f"truncation radius R={R} must exceed the lattice constant a={spec.a}")
    pos, lay, sub, cel = [], [], [], []
    for j in (1, 2):
        for s in (0, 1):
            p, c = _disk_sites(spec, j, s, R)
            pos.append(p)
            cel.append(c)
            lay.append(np.full(len(p), j, np.int8))
            sub.append(np.full(len(p), s, np.int8))
    return SiteTable(positions=np.concatenate(pos), layer=np.concatenate(lay),
                     sublattice=np.concatenate(sub), cells=np.concatenate(cel),
                     R=float(R), spec=spec)


def kpath(points, samples_per_segment: int):
    """Piecewise-linear path through the given momenta.

    Returns (ks, arclength) with samples_per_segment points per segment plus
    the final endpoint."""
    pts = np.asarray(points, float)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("kpath needs at least two points")
    n = int(samples_per_segment)
    if n < 1:
        raise ValueError("samples_per_segment must be positive")
    ks = []
    for p, q in zip(pts[:-1], pts[1:]):
        t = np.arange(n)[:, None] / n
        ks.append(p + t * (q - p))
    ks.append(pts[-1:])
    ks = np.concatenate(ks)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ks, axis=0), axis=1))])
    return ks, arc
