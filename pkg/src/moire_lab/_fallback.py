"""Pure numpy/scipy versions of the compiled kernels (same signatures)."""
import numpy as np
from scipy.spatial import cKDTree


def pair_search(pos, rc):
    pos = np.ascontiguousarray(pos, float)
    if len(pos) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    pairs = cKDTree(pos).query_pairs(rc * (1 + 1e-15), output_type="ndarray")
    if len(pairs) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64)


def csr_matvec(indptr, indices, data, x, y, nthreads=1):
    prod = data * x[indices]
    lens = np.diff(indptr)
    y[:] = 0
    nz = lens > 0
    if np.any(nz):
        y[nz] = np.add.reduceat(prod, indptr[:-1][nz])
    return y
