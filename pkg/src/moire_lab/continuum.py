"""First- and second-order continuum models: plane-wave band structure and a
spectral real-space operator on a periodic moire supercell for dynamics.

Units: positions in Angstrom, momenta in 1/Angstrom, energies in eV and time
in hbar/eV. The Dirac energy shift is not part of the real-space operator; it
enters as a global phase when sampling onto the lattice."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.fft import fft2, ifft2

from .bloch import DiracData, dirac_data
from .geometry import LatticeSpec, SQ3, reciprocal_data, rot
from .hopping import InterlayerCoeffs, InterlayerModel, IntralayerModel, extract_interlayer_coeffs

W = np.exp(2j * np.pi / 3)
T1 = np.array([[1, 1], [1, 1]], complex)
T2 = np.array([[1, np.conj(W)], [W, 1]], complex)
T3 = np.array([[1, W], [np.conj(W), 1]], complex)
TMATS = (T1, T2, T3)

TERMS = ("nnn", "grad", "h2")


class NumericalFailure(RuntimeError):
    pass


def parse_order(order) -> frozenset:
    """Term selection: '1', '2', '2-minus-<term>', '1+<term>[+<term>]'.

    Terms: nnn (next-nearest shell), grad (momentum-dependent first shell),
    h2 (quadratic Dirac, rotation and angular-derivative corrections)."""
    if isinstance(order, frozenset):
        return order
    s = str(order).strip().lower()
    if s in ("1", "order1"):
        return frozenset()
    if s in ("2", "order2"):
        return frozenset(TERMS)
    if s.startswith("2-minus-"):
        t = s[len("2-minus-"):]
        if t not in TERMS:
            raise ValueError(f"unknown term {t!r}")
        return frozenset(TERMS) - {t}
    if s.startswith("1+"):
        ts = s[2:].split("+")
        for t in ts:
            if t not in TERMS:
                raise ValueError(f"unknown term {t!r}")
        return frozenset(ts)
    raise ValueError(f"unrecognized order {order!r}")


@dataclass(frozen=True)
class ContinuumParams:
    alpha: complex       # Fermi coefficient (eV A); v = |alpha|
    vd: float            # quadratic diagonal coefficient (eV A^2)
    vo: complex          # quadratic off-diagonal coefficient (eV A^2)
    eshift: float        # Dirac energy (eV)
    w1: float
    w2: float
    w3: float
    w1prime: float       # signed radial derivative coupling (eV A)
    lam: tuple           # six angular values
    mu: tuple            # three angular derivatives (1/|K| units -> A)
    theta: float
    epsilon: float
    sPhys: np.ndarray    # (3, 2)
    Khat: np.ndarray     # unit vector along K
    Kabs: float
    am: np.ndarray
    bm: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    dshift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    zeta: float = 0.0
    xi: float = 0.0

    @property
    def v(self) -> float:
        return abs(self.alpha)

    @property
    def nn_phase(self):
        d = self.dshift
        return np.array([1.0, np.exp(-1j * self.b2 @ d), np.exp(1j * self.b1 @ d)])

    @property
    def nnn_phase(self):
        d, b1, b2 = self.dshift, self.b1, self.b2
        return np.array([np.exp(1j * (b1 - b2) @ d), np.exp(1j * (b1 + b2) @ d),
                         np.exp(-1j * (b1 + b2) @ d)])

    def wprime(self, n: int) -> np.ndarray:
        return self.w1prime * (rot(2 * np.pi * n / 3) @ self.Khat)

    def scaled(self, **kw) -> "ContinuumParams":
        return replace(self, **kw)

    def coupling_terms(self, terms: frozenset, leading: bool = True):
        """Interlayer upper-block terms as lists.

        Each entry: (shift vector q, 2x2 matrix M, a, b, deriv_first) meaning
        exp(i q.r) M (a + b.p) with p applied before the phase when deriv_first.
        leading=False drops the first-shell w1 coupling and keeps only the
        selected corrections."""
        out = []
        nn = self.nn_phase
        lam = np.asarray(self.lam, complex)
        mu = np.asarray(self.mu, complex)
        s = self.sPhys
        for n in range(3):
            c = nn[n] * lam[2 * n]
            b = np.zeros(2, complex)
            if "grad" in terms:
                b = b + c * self.wprime(n)
            if leading or np.any(b != 0):
                out.append((-s[n], TMATS[n], c * self.w1 if leading else 0.0, b, True))
        if "h2" in terms and np.any(mu != 0):
            dirs = [rot(np.pi / 2), rot(7 * np.pi / 6), rot(11 * np.pi / 6)]
            for n in range(3):
                cm = nn[n] * mu[n] * self.w1
                out.append((-s[n], TMATS[n], cm * np.sin(self.theta / 2) * self.Kabs,
                            cm * (dirs[n] @ self.Khat), True))
        if "nnn" in terms:
            nnn = self.nnn_phase
            idx = (3, 5, 1)
            for n in range(3):
                out.append((2 * s[n], TMATS[n], nnn[n] * lam[idx[n]] * self.w2,
                            np.zeros(2, complex), True))
        return out


def make_params(spec: LatticeSpec, intra: IntralayerModel, inter: InterlayerModel,
                dirac: Optional[DiracData] = None,
                coeffs: Optional[InterlayerCoeffs] = None) -> ContinuumParams:
    rec = reciprocal_data(spec)
    dd = dirac or dirac_data(intra, spec)
    cf = coeffs or extract_interlayer_coeffs(inter, rec, spec.epsilon)
    return ContinuumParams(alpha=dd.alpha, vd=dd.vd, vo=dd.vo, eshift=dd.eshift,
                           w1=cf.w1, w2=cf.w2, w3=cf.w3, w1prime=cf.w1prime,
                           lam=tuple(cf.lam), mu=tuple(cf.mu), theta=spec.theta,
                           epsilon=spec.epsilon, sPhys=rec.sPhys.copy(),
                           Khat=rec.K / np.linalg.norm(rec.K), Kabs=float(np.linalg.norm(rec.K)),
                           am=rec.am.copy(), bm=rec.bm.copy(), b1=rec.b1, b2=rec.b2,
                           dshift=np.asarray(spec.dshift, float), zeta=cf.zeta, xi=cf.xi)


# ---------------------------------------------------------------- intralayer blocks

def intra_block(px, py, params: ContinuumParams, layer: int, terms: frozenset,
                leading: bool = True):
    """2x2 intralayer symbol at momenta (px, py) (arrays); returns (..., 2, 2)."""
    a = params.alpha
    pm = px - 1j * py
    pp = px + 1j * py
    shape = np.shape(px)
    h = np.zeros(shape + (2, 2), complex)
    if leading:
        h[..., 0, 1] = a * pm
        h[..., 1, 0] = np.conj(a) * pp
    if "h2" in terms:
        sgn = -1.0 if layer == 1 else 1.0
        st = np.sin(params.theta / 2)
        # rotation correction -/+ i sin(theta/2) sigma_3 L
        h[..., 0, 1] += sgn * 1j * st * a * pm
        h[..., 1, 0] += -sgn * 1j * st * np.conj(a) * pp
        p2 = px * px + py * py
        h[..., 0, 0] += params.vd * p2
        h[..., 1, 1] += params.vd * p2
        h[..., 0, 1] += params.vo * pp ** 2
        h[..., 1, 0] += np.conj(params.vo) * pm ** 2
    return h


# ---------------------------------------------------------------- plane-wave basis

@dataclass(frozen=True)
class PlaneWaveBasis:
    ints: np.ndarray     # (nG, 2) integer coordinates of G in (bm1, bm2)
    G: np.ndarray        # (nG, 2)
    s1: np.ndarray
    Gcut: float
    bm: np.ndarray

    @property
    def size(self) -> int:
        return 4 * len(self.G)

    def index(self):
        return {tuple(m): i for i, m in enumerate(self.ints)}


def lattice_ints(v, bm) -> np.ndarray:
    """Integer coordinates of v in the basis rows of bm (checked)."""
    c = np.linalg.solve(bm.T, np.asarray(v, float))
    r = np.round(c)
    if np.max(np.abs(c - r)) > 1e-6:
        raise ValueError("vector is not on the moire reciprocal lattice")
    return r.astype(int)


def make_basis(params: ContinuumParams, Gcut: float) -> PlaneWaveBasis:
    bm = params.bm
    nmax = int(np.ceil(Gcut / (np.linalg.norm(bm[0]) * SQ3 / 2))) + 2
    m1, m2 = np.meshgrid(np.arange(-nmax, nmax + 1), np.arange(-nmax, nmax + 1), indexing="ij")
    ints = np.stack([m1.ravel(), m2.ravel()], 1)
    G = ints @ bm
    s1 = params.sPhys[0]
    keep = np.linalg.norm(G + s1 / 2, axis=1) <= Gcut + 1e-12
    order = np.lexsort((ints[keep][:, 1], ints[keep][:, 0]))
    return PlaneWaveBasis(ints=ints[keep][order], G=G[keep][order], s1=s1, Gcut=Gcut, bm=bm)


_SHIFT_CACHE: dict = {}


def _shift_map(basis: PlaneWaveBasis, dm):
    """Index pairs (j, i) with ints[i] = ints[j] + dm, both inside the basis."""
    key = (id(basis), int(dm[0]), int(dm[1]))
    hit = _SHIFT_CACHE.get(key)
    if hit is not None and hit[0] is basis:
        return hit[1]
    ints = basis.ints
    lo = ints.min(0) - np.abs(dm).max() - 1
    span = ints.max(0) - lo + np.abs(dm).max() + 2
    code = (ints[:, 0] - lo[0]) * span[1] + (ints[:, 1] - lo[1])
    shifted = (ints[:, 0] + dm[0] - lo[0]) * span[1] + (ints[:, 1] + dm[1] - lo[1])
    order = np.argsort(code)
    pos = np.searchsorted(code[order], shifted)
    pos = np.minimum(pos, len(code) - 1)
    ok = code[order][pos] == shifted
    res = (np.nonzero(ok)[0], order[pos[ok]])
    if len(_SHIFT_CACHE) > 256:
        _SHIFT_CACHE.clear()
    _SHIFT_CACHE[key] = (basis, res)
    return res


def build_bm_matrix(k, params: ContinuumParams, order, basis: PlaneWaveBasis,
                    shift: bool = True) -> np.ndarray:
    """Dense Hamiltonian at Bloch momentum k. Index layout: 4*iG + component,
    components (1A, 1B, 2A, 2B); layer 1 at k+G, layer 2 at k+G+s1."""
    terms = parse_order(order)
    k = np.asarray(k, float)
    nG = len(basis.G)
    H = np.zeros((4 * nG, 4 * nG), complex)
    q1 = k + basis.G
    q2 = q1 + basis.s1
    h1 = intra_block(q1[:, 0], q1[:, 1], params, 1, terms)
    h2 = intra_block(q2[:, 0], q2[:, 1], params, 2, terms)
    ii = np.arange(nG)
    for a in range(2):
        for b in range(2):
            H[4 * ii + a, 4 * ii + b] = h1[:, a, b]
            H[4 * ii + 2 + a, 4 * ii + 2 + b] = h2[:, a, b]
    s1 = basis.s1
    U = np.zeros_like(H)
    for (q, M, a0, bvec, _) in params.coupling_terms(terms):
        # layer-2 mode G' maps to layer-1 mode G = G' + s1 + q
        src, dst = _shift_map(basis, lattice_ints(s1 + q, basis.bm))
        if len(src) == 0:
            continue
        amp = a0 + q2[src] @ bvec
        for a in range(2):
            for b in range(2):
                U[4 * dst + a, 4 * src + 2 + b] += M[a, b] * amp
    H += U + U.conj().T
    if shift:
        H += params.eshift * np.eye(4 * nG)
    return H


@dataclass
class BlochBands:
    ks: np.ndarray
    energies: np.ndarray              # (nk, nbands) eV
    vectors: Optional[list] = None
    residual: float = 0.0
    converged: Optional[bool] = None
    convergence_shift: Optional[float] = None
    arclength: Optional[np.ndarray] = None

    def middle(self, nb=2) -> np.ndarray:
        n = self.energies.shape[1]
        return self.energies[:, n // 2 - nb // 2:n // 2 + nb // 2]


def _middle_slice(n, nb):
    return slice(n // 2 - nb // 2, n // 2 + nb // 2)


def band_structure(path, params: ContinuumParams, order, G_cut: float, keep_vectors=False,
                   check_convergence=True, conv_stride: int = 5, nmid: int = 8) -> BlochBands:
    ks = np.asarray(path, float)
    basis = make_basis(params, G_cut)
    E, V = [], []
    res = 0.0
    for k in ks:
        H = build_bm_matrix(k, params, order, basis)
        try:
            w, v = np.linalg.eigh(H)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(f"eigensolver failed at k={k}") from exc
        r = np.linalg.norm(H @ v - v * w, axis=0).max() / max(np.abs(w).max(), 1e-300)
        res = max(res, r)
        E.append(w)
        if keep_vectors:
            V.append(v)
    E = np.array(E)
    out = BlochBands(ks=ks, energies=E, vectors=V if keep_vectors else None, residual=float(res))
    if check_convergence:
        big = make_basis(params, 1.3 * G_cut)
        sl = _middle_slice(E.shape[1], nmid)
        shift = 0.0
        for i in list(range(0, len(ks), conv_stride)) + [len(ks) - 1]:
            wb = np.linalg.eigvalsh(build_bm_matrix(ks[i], params, order, big))
            sb = _middle_slice(len(wb), nmid)
            shift = max(shift, np.abs(wb[sb] - E[i, sl]).max())
        out.convergence_shift = float(shift)
        out.converged = bool(shift < 1e-4)
    return out


# ---------------------------------------------------------------- real-space grid

@dataclass
class FieldGrid:
    """Four-component envelope on a periodic supercell spanned by
    M1*am1, M2*am2, sampled at u = m/N (m = 0..N-1) in lattice coordinates."""
    data: np.ndarray     # (4, N1, N2) complex
    L: np.ndarray        # (2, 2) rows: supercell vectors (A)
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.data.shape[1], self.data.shape[2]

    @property
    def cell_area(self) -> float:
        return abs(np.linalg.det(self.L))

    @property
    def dA(self) -> float:
        return self.cell_area / (self.N[0] * self.N[1])

    def copy(self, data=None, t=None) -> "FieldGrid":
        return FieldGrid(self.data.copy() if data is None else data, self.L.copy(),
                         self.t if t is None else t, dict(self.meta))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.data) ** 2) * self.dA))

    def inner(self, other: "FieldGrid") -> complex:
        return complex(np.vdot(self.data, other.data) * self.dA)


def grid_coords(L, N1, N2):
    """Centered lattice coordinates u in [-1/2, 1/2) and positions (N1, N2, 2)."""
    u1 = np.fft.fftfreq(N1)  # m/N wrapped into [-1/2, 1/2)
    u2 = np.fft.fftfreq(N2)
    U1, U2 = np.meshgrid(u1, u2, indexing="ij")
    X = U1[..., None] * L[0] + U2[..., None] * L[1]
    return U1, U2, X


def supercell_vectors(params: ContinuumParams, M1: int, M2: int) -> np.ndarray:
    if M1 % 3 or M2 % 3:
        raise ValueError("supercell multiples must be multiples of 3")
    return np.array([M1 * params.am[0], M2 * params.am[1]])


def grid_momenta(L, N1, N2):
    B = 2 * np.pi * np.linalg.inv(L).T  # rows B1, B2 with L_i . B_j = 2 pi delta
    n1 = np.fft.fftfreq(N1) * N1
    n2 = np.fft.fftfreq(N2) * N2
    M1, M2 = np.meshgrid(n1, n2, indexing="ij")
    P = M1[..., None] * B[0] + M2[..., None] * B[1]
    return P[..., 0], P[..., 1], B


def zero_field(params: ContinuumParams, M=(3, 3), N=(81, 81)) -> FieldGrid:
    L = supercell_vectors(params, *M)
    return FieldGrid(np.zeros((4,) + tuple(N), complex), L)


class GridOperator:
    """Continuum Hamiltonian acting on FieldGrid data by FFT differentiation
    and pointwise phase multiplication. Hermitian as a matrix on the grid."""

    def __init__(self, params: ContinuumParams, order, L, N, intra: bool = True,
                 inter: bool = True, leading: bool = True):
        self.params = params
        self.terms = parse_order(order)
        self.L = np.asarray(L, float)
        self.N = tuple(N)
        for n in self.N:
            if n % 2 == 0:
                raise ValueError("grid sizes must be odd")
        self.px, self.py, self.B = grid_momenta(self.L, *self.N)
        _, _, X = grid_coords(self.L, *self.N)
        self.X = X
        self.intra = intra
        self.inter = inter
        self.h1 = intra_block(self.px, self.py, params, 1, self.terms, leading) if intra else None
        self.h2 = intra_block(self.px, self.py, params, 2, self.terms, leading) if intra else None
        self.coup = []
        if inter:
            for (q, M, a0, b, dfirst) in params.coupling_terms(self.terms, leading):
                # every modulation must be periodic on the supercell
                per = self.L @ q / (2 * np.pi)
                if np.max(np.abs(per - np.round(per))) > 1e-8:
                    raise ValueError("coupling modulation not periodic on the supercell")
                ph = np.exp(1j * (X @ q))
                self.coup.append((ph, M, a0, b))
        self.has_deriv = any(np.any(b != 0) for (_, _, _, b) in self.coup)

    def norm_estimate(self) -> float:
        est = 0.0
        if self.intra:
            est = max(np.linalg.norm(self.h1, ord=2, axis=(-2, -1)).max(),
                      np.linalg.norm(self.h2, ord=2, axis=(-2, -1)).max())
        pmax = np.sqrt(self.px ** 2 + self.py ** 2).max()
        for (_, M, a0, b) in self.coup:
            est += 2 * (abs(a0) + np.linalg.norm(b) * pmax)
        return float(est)

    def apply(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, complex)
        out = np.zeros_like(f)
        F = None
        if self.intra:
            F = fft2(f, axes=(1, 2))
            G = np.empty_like(F)
            G[0] = self.h1[..., 0, 0] * F[0] + self.h1[..., 0, 1] * F[1]
            G[1] = self.h1[..., 1, 0] * F[0] + self.h1[..., 1, 1] * F[1]
            G[2] = self.h2[..., 0, 0] * F[2] + self.h2[..., 0, 1] * F[3]
            G[3] = self.h2[..., 1, 0] * F[2] + self.h2[..., 1, 1] * F[3]
            out += ifft2(G, axes=(1, 2))
        if not self.coup:
            return out
        f1, f2 = f[0:2], f[2:4]
        if self.has_deriv:
            if F is None:
                F = fft2(f, axes=(1, 2))
            gx = ifft2(self.px * F[2:4], axes=(1, 2))
            gy = ifft2(self.py * F[2:4], axes=(1, 2))
        lowF = np.zeros((2,) + self.N, complex) if self.has_deriv else None
        for (ph, M, a0, b) in self.coup:
            # upper block: phase * M * (a0 + b.p) applied to layer 2
            g = a0 * f2
            if np.any(b != 0):
                g = g + b[0] * gx + b[1] * gy
            out[0:2] += ph * np.einsum("ij,j...->i...", M, g)
            # lower block, exact adjoint: (conj(a0) + conj(b).p) M^dagger conj(phase)
            h = np.conj(ph) * np.einsum("ij,j...->i...", M.conj().T, f1)
            out[2:4] += np.conj(a0) * h
            if np.any(b != 0):
                H = fft2(h, axes=(1, 2))
                lowF += (np.conj(b[0]) * self.px + np.conj(b[1]) * self.py) * H
        if self.has_deriv:
            out[2:4] += ifft2(lowF, axes=(1, 2))
        return out

    __call__ = apply


def aliasing_tail(f: np.ndarray) -> float:
    """Largest Fourier magnitude on the outermost index shell relative to the peak."""
    F = np.abs(fft2(f, axes=(1, 2)))
    peak = F.max()
    if peak == 0:
        return 0.0
    N1, N2 = F.shape[1:]
    n1 = np.abs(np.fft.fftfreq(N1) * N1)
    n2 = np.abs(np.fft.fftfreq(N2) * N2)
    edge = (n1[:, None] >= n1.max()) | (n2[None, :] >= n2.max())
    return float(F[:, edge].max() / peak)


def apply_H(field: FieldGrid, params: ContinuumParams, order, op: Optional[GridOperator] = None,
            alias_tol: Optional[float] = None) -> FieldGrid:
    if op is None:
        op = GridOperator(params, order, field.L, field.N)
    if alias_tol is not None and aliasing_tail(field.data) > alias_tol:
        raise NumericalFailure("field has spectral content at the grid Nyquist shell; refine the grid")
    return field.copy(data=op.apply(field.data))


# ---------------------------------------------------------------- time stepping

def _rk4(op, y, dt, forcing=None):
    def rhs(z):
        return -1j * op(z)
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _time_grid(T, dt, snapshots):
    snaps = sorted(set(float(s) for s in (snapshots or [])) | {float(T)})
    if snaps[0] < 0 or snaps[-1] > T + 1e-12:
        raise ValueError("snapshot times must lie in [0, T]")
    return snaps


def evolve(field: FieldGrid, params: ContinuumParams, order, dt: float, T: float,
           snapshots=None, method: str = "rk4", op: Optional[GridOperator] = None,
           drift_tol: float = 1e-6, krylov_m: int = 30, krylov_tol: float = 1e-12):
    """exp(-i H t) applied to a field; returns [(t, FieldGrid)]."""
    from .tightbinding import krylov_step
    op = op or GridOperator(params, order, field.L, field.N)
    if method == "rk4":
        nrm = op.norm_estimate()
        if nrm > 0 and dt > 0.2 / nrm * (1 + 1e-12):
            raise ValueError(f"dt={dt} exceeds 0.2/|H| = {0.2 / nrm:.4g}")
    snaps = _time_grid(T, dt, snapshots)
    y = field.data.copy()
    n0 = np.linalg.norm(y)
    t = field.t
    out = []
    shape = y.shape
    mv = lambda v: op(v.reshape(shape)).ravel()
    for ts in snaps:
        target = field.t + ts
        if ts == 0:
            out.append((0.0, field.copy(data=y.copy(), t=t)))
            continue
        while t < target - 1e-13 * max(1.0, target):
            h = min(dt, target - t)
            if method == "rk4":
                y = _rk4(op, y, h)
            else:
                w, h, _ = krylov_step(mv, y.ravel(), h, m=krylov_m, tol=krylov_tol)
                y = w.reshape(shape)
            t = target if abs(t + h - target) < 1e-13 * max(1.0, target) else t + h
            if n0 > 0:
                growth = np.linalg.norm(y) / n0 - 1
                if not np.isfinite(growth) or growth > 1e-3:
                    raise NumericalFailure("continuum evolution unstable; reduce dt")
        if n0 > 0 and abs(np.linalg.norm(y) / n0 - 1) > drift_tol:
            raise NumericalFailure(
                f"norm drift {abs(np.linalg.norm(y) / n0 - 1):.2e} exceeds {drift_tol:g}; reduce dt")
        out.append((ts, field.copy(data=y.copy(), t=target)))
    return out


@dataclass
class MultiscaleResult:
    times: list
    f1: list
    fnnn: list
    fgrad: list
    f2: list
    combined: list


def correction_operators(params, L, N):
    """Physical correction operators (next shell, gradient, second order) such
    that the full second-order operator is H1 + Hnnn + Hgrad + H2."""
    Hnnn = GridOperator(params, frozenset({"nnn"}), L, N, intra=False, leading=False)
    Hgrad = GridOperator(params, frozenset({"grad"}), L, N, intra=False, leading=False)
    H2 = GridOperator(params, frozenset({"h2"}), L, N, leading=False)
    return Hnnn, Hgrad, H2


def multiscale_evolve(f0: FieldGrid, params: ContinuumParams, dt: float, T: float,
                      snapshots=None, weights=(1.0, 1.0, 1.0)) -> MultiscaleResult:
    """Co-evolve the leading field and the three forced correction fields.

    The physical correction operators already carry the zeta, xi and epsilon
    factors; weights scale them (all zero turns the corrections off)."""
    H1 = GridOperator(params, "1", f0.L, f0.N)
    Hn, Hg, H2 = correction_operators(params, f0.L, f0.N)
    ops = [Hn, Hg, H2]
    nrm = H1.norm_estimate()
    if nrm > 0 and dt > 0.2 / nrm * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds 0.2/|H| = {0.2 / nrm:.4g}")
    snaps = _time_grid(T, dt, snapshots)

    def rhs(Y):
        out = np.empty_like(Y)
        out[0] = -1j * H1(Y[0])
        for i in range(3):
            out[i + 1] = -1j * (H1(Y[i + 1]) + weights[i] * ops[i](Y[0]) if weights[i] else H1(Y[i + 1]))
        return out

    Y = np.zeros((4,) + f0.data.shape, complex)
    Y[0] = f0.data
    t = 0.0
    res = MultiscaleResult([], [], [], [], [], [])

    def record(ts):
        res.times.append(ts)
        parts = [f0.copy(data=Y[i].copy(), t=ts) for i in range(4)]
        res.f1.append(parts[0])
        res.fnnn.append(parts[1])
        res.fgrad.append(parts[2])
        res.f2.append(parts[3])
        res.combined.append(f0.copy(data=Y.sum(axis=0), t=ts))

    for ts in snaps:
        while t < ts - 1e-13 * max(1.0, ts):
            h = min(dt, ts - t)
            k1 = rhs(Y)
            k2 = rhs(Y + 0.5 * h * k1)
            k3 = rhs(Y + 0.5 * h * k2)
            k4 = rhs(Y + h * k3)
            Y = Y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = ts if abs(t + h - ts) < 1e-13 * max(1.0, ts) else t + h
        if not np.all(np.isfinite(Y)):
            raise NumericalFailure("multiscale evolution produced non-finite values")
        record(ts)
    res.weights = weights
    res.ops = ops
    return res


def multiscale_residual(res: MultiscaleResult, params: ContinuumParams = None) -> np.ndarray:
    """Grid norm of (sum of correction operators)(sum of correction fields) per time."""
    ops = res.ops
    w = res.weights
    out = []
    for i in range(len(res.times)):
        g = w[0] * res.fnnn[i].data + w[1] * res.fgrad[i].data + w[2] * res.f2[i].data
        r = sum(wi * op(g) for wi, op in zip(w, ops) if wi)
        r = np.zeros_like(g) if isinstance(r, int) else r
        out.append(np.sqrt(np.sum(np.abs(r) ** 2) * res.f1[i].dA))
    return np.array(out)


# ---------------------------------------------------------------- eigenpackets

def synthesize(k, vec, basis: PlaneWaveBasis, L, N) -> np.ndarray:
    """Evaluate a plane-wave eigenvector on the centered grid (4, N1, N2)."""
    k = np.asarray(k, float)
    _, _, X = grid_coords(L, *N)
    B = 2 * np.pi * np.linalg.inv(L).T
    out = np.zeros((4,) + tuple(N), complex)
    c = vec.reshape(-1, 4)
    for layer, off in ((0, np.zeros(2)), (1, basis.s1)):
        q = k + basis.G + off
        nf = np.linalg.solve(B.T, q.T).T
        ni = np.round(nf)
        if np.max(np.abs(nf - ni)) < 1e-9:
            # modes on the supercell reciprocal lattice: place and inverse FFT
            ni = ni.astype(int)
            if np.any(np.abs(ni[:, 0]) > N[0] // 2) or np.any(np.abs(ni[:, 1]) > N[1] // 2):
                raise ValueError("grid too coarse for the plane-wave cutoff")
            for s in range(2):
                F = np.zeros(N, complex)
                np.add.at(F, (ni[:, 0] % N[0], ni[:, 1] % N[1]), c[:, 2 * layer + s])
                out[2 * layer + s] = ifft2(F) * (N[0] * N[1])
        else:
            ph = np.exp(1j * (X @ q.T))  # (N1, N2, nG)
            for s in range(2):
                out[2 * layer + s] = ph @ c[:, 2 * layer + s]
    return out


def eigenpacket(k, n: int, params: ContinuumParams, order, basis: PlaneWaveBasis,
                M=(3, 3), N=(81, 81)):
    """Band-n Bloch eigenfunction at k on a FieldGrid, normalized in the grid norm."""
    H = build_bm_matrix(k, params, order, basis)
    w, v = np.linalg.eigh(H)
    if not 0 <= n < len(w):
        raise ValueError("band index out of range")
    gaps = [abs(w[n] - w[m]) for m in (n - 1, n + 1) if 0 <= m < len(w)]
    degenerate = min(gaps) < 1e-6 if gaps else False
    if degenerate:
        warnings.warn(f"band {n} is degenerate at k (gap {min(gaps):.2e} eV); gauge is ambiguous")
    vec = v[:, n]
    # fix the gauge: largest coefficient real positive
    j = np.argmax(np.abs(vec))
    vec = vec * np.exp(-1j * np.angle(vec[j]))
    L = supercell_vectors(params, *M)
    data = synthesize(k, vec, basis, L, N)
    fg = FieldGrid(data, L, 0.0, {"k": list(map(float, k)), "band": n, "energy": float(w[n]),
                                  "degenerate": bool(degenerate)})
    fg.data /= fg.norm()
    return fg, float(w[n])
