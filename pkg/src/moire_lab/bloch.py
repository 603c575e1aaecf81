"""Monolayer Bloch Hamiltonian by direct lattice sums and its Taylor data at
the Dirac point."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import LatticeSpec, rot
from .hopping import IntralayerModel


class SymmetryViolation(RuntimeError):
    pass


class BlochHamiltonian:
    """h~(k)[s, s'] = sum_R exp(-i (R + tau^{s s'}).k) h(R + tau^{s s'})."""

    def __init__(self, model: IntralayerModel, spec: LatticeSpec | None = None,
                 cutoff: float | None = None):
        self.model = model
        self.spec = spec or LatticeSpec()
        self.cutoff = model.cutoff + self.spec.a if cutoff is None else cutoff
        A = self.spec.lattice_vectors
        taus = [np.asarray(self.spec.tauA), self.spec.tauB]
        nmax = int(np.ceil(self.cutoff / (self.spec.a * np.sqrt(3) / 2))) + 2
        n1, n2 = np.meshgrid(np.arange(-nmax, nmax + 1), np.arange(-nmax, nmax + 1), indexing="ij")
        R = np.stack([n1.ravel(), n2.ravel()], 1) @ A
        self.disp = {}
        self.hop = {}
        for s in (0, 1):
            for t in (0, 1):
                d = R + (taus[s] - taus[t])
                keep = np.linalg.norm(d, axis=1) <= self.cutoff
                d = d[keep]
                h = model.lattice_value(np.linalg.norm(d, axis=1))
                nz = h != 0
                self.disp[s, t] = d[nz]
                self.hop[s, t] = h[nz]

    def _sum(self, k, s, t, order=0):
        d, h = self.disp[s, t], self.hop[s, t]
        ph = np.exp(-1j * (d @ np.asarray(k, float))) * h
        if order == 0:
            return ph.sum()
        if order == 1:
            return -1j * (d * ph[:, None]).sum(0)
        return -np.einsum("n,ni,nj->ij", ph, d, d)

    def __call__(self, k) -> np.ndarray:
        return np.array([[self._sum(k, s, t) for t in (0, 1)] for s in (0, 1)])

    def gradient(self, k) -> np.ndarray:
        """(2, 2, 2): [s, t, i] = d/dk_i h~[s, t]."""
        return np.array([[self._sum(k, s, t, 1) for t in (0, 1)] for s in (0, 1)])

    def hessian(self, k) -> np.ndarray:
        return np.array([[self._sum(k, s, t, 2) for t in (0, 1)] for s in (0, 1)])


def bloch_matrix(model: IntralayerModel, k, spec: LatticeSpec | None = None) -> np.ndarray:
    return BlochHamiltonian(model, spec)(k)


@dataclass(frozen=True)
class DiracData:
    """Taylor data of the monolayer Bloch Hamiltonian at K.

    alphaD, alphaO are the Hessian coefficients (grad^2 h~AA = alphaD I,
    grad^2 h~AB = alphaO [[1, i], [i, -1]]); the quadratic Taylor coefficients
    vd = alphaD/2, vo = alphaO/2 are the numbers that enter the continuum model."""
    eshift: float
    alpha: complex
    alphaPrime: complex
    alphaO: complex
    alphaD: float
    fd_rel_error: float
    diag_grad: float

    @property
    def v(self) -> float:
        return abs(self.alpha)

    @property
    def vd(self) -> float:
        return self.alphaD / 2

    @property
    def vo(self) -> complex:
        return self.alphaO / 2


def _fd(f, k, h):
    """Richardson-extrapolated central differences of f (array valued) at k."""
    out = []
    for i in range(2):
        e = np.zeros(2)
        e[i] = 1.0
        d1 = (f(k + h * e) - f(k - h * e)) / (2 * h)
        d2 = (f(k + h / 2 * e) - f(k - h / 2 * e)) / h
        out.append((4 * d2 - d1) / 3)
    return np.stack(out, -1)


def dirac_data(model: IntralayerModel, spec: LatticeSpec | None = None,
               step: float = 1e-4, grad_tol: float = 1e-8) -> DiracData:
    bh = BlochHamiltonian(model, spec)
    a = bh.spec.a
    K = 4 * np.pi / (3 * a) * np.array([1.0, 0.0])
    h = bh(K)
    g = bh.gradient(K)
    H = bh.hessian(K)
    gp = bh.gradient(-K)
    diag_grad = float(max(np.abs(g[0, 0]).max(), np.abs(g[1, 1]).max()))
    if diag_grad > grad_tol:
        raise SymmetryViolation(f"diagonal gradient at K is {diag_grad:.3e} eV A")
    # finite-difference cross-check of every analytic derivative
    scale = max(np.abs(g).max(), 1e-300)
    fd1 = _fd(bh, K, step)
    fd2 = _fd(lambda q: bh.gradient(q), K, step)
    err1 = np.abs(fd1 - g).max() / scale
    err2 = np.abs(fd2 - H).max() / max(np.abs(H).max(), 1e-300)
    return DiracData(eshift=float(h[0, 0].real), alpha=complex(g[0, 1, 0]),
                     alphaPrime=complex(gp[0, 1, 0]), alphaO=complex(H[0, 1, 0, 0]),
                     alphaD=float(H[0, 0, 0, 0].real), fd_rel_error=float(max(err1, err2)),
                     diag_grad=diag_grad)


@dataclass
class ConeReport:
    slope: float
    alpha_abs: float
    slope_rel_error: float
    per_radius_slope: np.ndarray
    fit_residual: float
    covariance_residual: float
    hAB_at_K: float
    diag_grad: float

    def passed(self, slope_tol=1e-3, cov_tol=1e-10) -> bool:
        return self.slope_rel_error < slope_tol and self.covariance_residual < cov_tol


def verify_dirac_cone(model: IntralayerModel, radii, spec: LatticeSpec | None = None,
                      n_angles: int = 12, n_random: int = 10, seed: int = 0) -> ConeReport:
    bh = BlochHamiltonian(model, spec)
    dd = dirac_data(model, spec)
    K = 4 * np.pi / (3 * bh.spec.a) * np.array([1.0, 0.0])
    radii = np.asarray(radii, float)
    if np.any(radii > 0.05 * np.linalg.norm(K)):
        raise ValueError("radii must be small (<= 0.05 |K|)")
    phis = 2 * np.pi * np.arange(n_angles) / n_angles
    slopes = []
    for q in radii:
        s = []
        for p in phis:
            ev = np.linalg.eigvalsh(bh(K + q * np.array([np.cos(p), np.sin(p)])))
            s.append((ev[1] - ev[0]) / (2 * q))
        slopes.append(np.mean(s))
    slopes = np.array(slopes)
    # slope(q) = s0 + c q^2: extrapolate to q -> 0
    X = np.stack([np.ones_like(radii), radii ** 2], 1)
    coef, *_ = np.linalg.lstsq(X, slopes, rcond=None)
    resid = float(np.abs(X @ coef - slopes).max())
    s0 = float(coef[0])
    rng = np.random.default_rng(seed)
    R3 = rot(2 * np.pi / 3)
    cov = 0.0
    for _ in range(n_random):
        k = K + rng.normal(size=2) * 0.3
        lhs = bh(R3 @ (k - K) + K)[0, 1]
        rhs = np.exp(-2j * np.pi / 3) * bh(k)[0, 1]
        cov = max(cov, abs(lhs - rhs))
    return ConeReport(slope=s0, alpha_abs=dd.v, slope_rel_error=abs(s0 - dd.v) / dd.v,
                      per_radius_slope=slopes, fit_residual=resid, covariance_residual=float(cov),
                      hAB_at_K=float(abs(bh(K)[0, 1])), diag_grad=dd.diag_grad)
