"""Truncated bilayer tight-binding Hamiltonian and Krylov time propagation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

from . import kernels
from .geometry import SiteTable
from .hopping import AMP_CUTOFF, InterlayerModel, IntralayerModel


class KrylovError(RuntimeError):
    pass


@dataclass
class SparseHermitian:
    """Hermitian operator in CSR form (eV). Built from an upper triangle plus
    its conjugate mirror, so H == H^dagger holds exactly."""
    matrix: sp.csr_matrix
    nthreads: int = 1

    def __post_init__(self):
        m = self.matrix
        m.sort_indices()
        self.indptr = m.indptr.astype(np.int32)
        self.indices = m.indices.astype(np.int32)
        self.data = m.data.astype(np.complex128)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def matvec(self, x, out=None):
        x = np.ascontiguousarray(x, np.complex128)
        y = np.empty(self.dim, np.complex128) if out is None else out
        kernels.csr_matvec(self.indptr, self.indices, self.data, x, y, self.nthreads)
        return y

    __matmul__ = matvec

    def hermiticity_residual(self) -> float:
        d = self.matrix - self.matrix.conj().T
        return float(np.abs(d.data).max()) if d.nnz else 0.0

    def norm_bound(self) -> float:
        """Max absolute row sum, an upper bound on the spectral norm."""
        return float(np.asarray(abs(self.matrix).sum(axis=1)).max()) if self.nnz else 0.0


def assemble(sites: SiteTable, intra: IntralayerModel, inter: Optional[InterlayerModel],
             inter_fn: Optional[Callable] = None, amp_cutoff: float = AMP_CUTOFF,
             nthreads: int = 1) -> SparseHermitian:
    """Sparse Hamiltonian on the site table.

    H[i, j] = h(x_i - x_j) within a layer and h12(x_i - x_j) for i in layer 1,
    j in layer 2; the lower block is the adjoint. inter_fn, if given, replaces
    the radial interlayer function and receives the displacement vectors."""
    pos = sites.positions
    n = len(sites)
    rc_intra = intra.cutoff
    rc_inter = 0.0
    if inter_fn is not None or (inter is not None and inter.kind != "zero"):
        rc_inter = inter.cutoff if inter is not None else 20.0
    rc = max(rc_intra, rc_inter)
    I, J = kernels.pair_search(np.ascontiguousarray(pos), rc)
    d = pos[I] - pos[J]
    r = np.hypot(d[:, 0], d[:, 1])
    same = sites.layer[I] == sites.layer[J]
    if np.any(same & (r < 1e-9)):
        raise ValueError("site table has duplicate positions within a layer")
    vals = np.zeros(len(I), complex)
    vals[same] = intra.radial(r[same])
    other = ~same & (r <= rc_inter)
    if np.any(other):
        # orient every interlayer pair as (layer 1, layer 2)
        flip = sites.layer[I] == 2
        dd = np.where(flip[:, None], -d, d)[other]
        if inter_fn is not None:
            hv = inter_fn(dd)
        else:
            hv = inter.radial(np.hypot(dd[:, 0], dd[:, 1]))
        hv = np.asarray(hv, complex)
        vals[other] = np.where(flip[other], np.conj(hv), hv)
    keep = np.abs(vals) >= amp_cutoff
    I, J, vals = I[keep], J[keep], vals[keep]
    diag_val = intra.radial(0.0) if intra.include_onsite else 0.0
    rows = [I, J]
    cols = [J, I]
    data = [vals, np.conj(vals)]
    if diag_val != 0:
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        data.append(np.full(n, diag_val, complex))
    H = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    H.sum_duplicates()
    return SparseHermitian(H, nthreads=nthreads)


def _as_operator(H):
    if isinstance(H, SparseHermitian):
        return H
    M = sp.csr_matrix(H, dtype=complex)
    d = M - M.conj().T
    scale = np.abs(M.data).max() if M.nnz else 1.0
    if d.nnz and np.abs(d.data).max() > 1e-12 * scale:
        raise ValueError("propagate requires a Hermitian operator")
    return SparseHermitian(M)


def tb_norm(psi) -> float:
    return float(np.linalg.norm(psi))


def tb_overlap(psi, phi) -> complex:
    psi = np.asarray(psi)
    phi = np.asarray(phi)
    if psi.shape != phi.shape:
        raise ValueError("state dimension mismatch")
    return complex(np.vdot(psi, phi))


def krylov_step(matvec, v, tau_max, m=30, tol=1e-10):
    """One Lanczos step of exp(-i H tau) v with tau <= tau_max chosen so the
    a posteriori error estimate stays below tol * |v|.

    Returns (w, tau, err)."""
    n = len(v)
    beta = np.linalg.norm(v)
    if beta == 0:
        return v.copy(), tau_max, 0.0
    m = min(m, n)
    V = np.empty((m + 1, n), complex)
    V[0] = v / beta
    alpha = np.zeros(m)
    offd = np.zeros(m)
    k_used = m
    breakdown = False
    for j in range(m):
        w = matvec(V[j])
        alpha[j] = np.vdot(V[j], w).real
        w -= alpha[j] * V[j]
        if j > 0:
            w -= offd[j - 1] * V[j - 1]
        # full reorthogonalization (two passes)
        for _ in range(2):
            w -= V[:j + 1].T @ (V[:j + 1].conj() @ w)
        offd[j] = np.linalg.norm(w)
        if offd[j] < 1e-13 * max(abs(alpha[j]), 1.0):
            k_used = j + 1
            breakdown = True
            break
        if j + 1 <= m:
            V[j + 1] = w / offd[j]
    k = k_used
    evals, evecs = eigh_tridiagonal(alpha[:k], offd[:k - 1]) if k > 1 else (alpha[:1], np.ones((1, 1)))
    c0 = evecs[0].conj()

    def coeffs(tau):
        return evecs @ (np.exp(-1j * evals * tau) * c0)

    if breakdown:
        tau = tau_max
        err = 0.0
    else:
        hnext = offd[k - 1]

        def err_of(tau):
            return beta * hnext * abs(coeffs(tau)[-1])

        tau = tau_max
        err = err_of(tau)
        tries = 0
        while err > tol * beta:
            tau *= 0.9 * (tol * beta / err) ** (1.0 / k) if err > 0 else 0.5
            err = err_of(tau)
            tries += 1
            if tries > 200:
                raise KrylovError(f"Krylov step did not reach tolerance, residual {err:.3e}")
    y = coeffs(tau)
    w = beta * (y @ V[:k])
    return w, tau, err


def propagate(H, psi0, dt: float, T: float, snapshots=None, m: int = 30, tol: float = 1e-10,
              callback=None):
    """psi(t) = exp(-i H t) psi0 by stepwise Lanczos exponentials.

    dt caps each step; snapshot times are hit exactly. Returns a list of
    (t, psi) including t = 0 if requested and always t = T."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    Hop = _as_operator(H)
    psi = np.array(psi0, dtype=complex)
    if psi.shape != (Hop.dim,):
        raise ValueError("state dimension mismatch")
    snaps = sorted(set(float(s) for s in (snapshots or [])) | {float(T)})
    if snaps and (snaps[0] < 0 or snaps[-1] > T + 1e-12):
        raise ValueError("snapshot times must lie in [0, T]")
    out = []
    t = 0.0
    if snaps and snaps[0] == 0.0:
        out.append((0.0, psi.copy()))
        snaps = snaps[1:]
    zero_op = Hop.nnz == 0 or not np.any(Hop.data)
    for ts in snaps:
        while t < ts - 1e-14 * max(1.0, ts):
            if zero_op:
                t = ts
                break
            step = min(dt, ts - t)
            psi, tau, _ = krylov_step(Hop.matvec, psi, step, m=m, tol=tol)
            t = ts if abs(t + tau - ts) < 1e-14 * max(1.0, ts) else t + tau
            if callback is not None:
                callback(t, psi)
        out.append((ts, psi.copy()))
    return out
