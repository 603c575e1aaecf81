# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: fixed-radius pair search on a cell list and a CSR
complex matrix-vector product parallel over rows."""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport floor
from libcpp.vector cimport vector

cnp.import_array()


def pair_search(double[:, ::1] pos, double rc):
    """All index pairs i < j with |pos_i - pos_j| <= rc."""
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t i, j, p, q
    cdef double xmin, ymin, dx, dy, rc2 = rc * rc
    cdef int nx, ny, cx, cy, ox, oy, c, cc
    cdef vector[long] out_i, out_j
    if n == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    xmin = pos[0, 0]
    ymin = pos[0, 1]
    cdef double xmax = xmin, ymax = ymin
    for i in range(n):
        if pos[i, 0] < xmin: xmin = pos[i, 0]
        if pos[i, 0] > xmax: xmax = pos[i, 0]
        if pos[i, 1] < ymin: ymin = pos[i, 1]
        if pos[i, 1] > ymax: ymax = pos[i, 1]
    nx = <int>floor((xmax - xmin) / rc) + 1
    ny = <int>floor((ymax - ymin) / rc) + 1
    cdef cnp.int64_t[::1] cell = np.empty(n, np.int64)
    cdef cnp.int64_t[::1] head = np.full(nx * ny + 1, 0, np.int64)
    for i in range(n):
        cx = <int>floor((pos[i, 0] - xmin) / rc)
        cy = <int>floor((pos[i, 1] - ymin) / rc)
        cell[i] = cx * ny + cy
        head[cell[i] + 1] += 1
    for c in range(nx * ny):
        head[c + 1] += head[c]
    cdef cnp.int64_t[::1] order = np.empty(n, np.int64)
    cdef cnp.int64_t[::1] fill = np.array(head[:nx * ny], dtype=np.int64)
    for i in range(n):
        order[fill[cell[i]]] = i
        fill[cell[i]] += 1
    for cx in range(nx):
        for cy in range(ny):
            c = cx * ny + cy
            for ox in range(cx - 1, cx + 2):
                if ox < 0 or ox >= nx:
                    continue
                for oy in range(cy - 1, cy + 2):
                    if oy < 0 or oy >= ny:
                        continue
                    cc = ox * ny + oy
                    if cc < c:
                        continue
                    for p in range(head[c], head[c + 1]):
                        i = order[p]
                        for q in range(head[cc], head[cc + 1]):
                            j = order[q]
                            if cc == c and j <= i:
                                continue
                            dx = pos[i, 0] - pos[j, 0]
                            dy = pos[i, 1] - pos[j, 1]
                            if dx * dx + dy * dy <= rc2:
                                if i < j:
                                    out_i.push_back(i)
                                    out_j.push_back(j)
                                else:
                                    out_i.push_back(j)
                                    out_j.push_back(i)
    cdef Py_ssize_t m = out_i.size()
    I = np.empty(m, np.int64)
    J = np.empty(m, np.int64)
    cdef cnp.int64_t[::1] Iv = I, Jv = J
    for p in range(m):
        Iv[p] = out_i[p]
        Jv[p] = out_j[p]
    return I, J


def csr_matvec(const int[::1] indptr, const int[::1] indices,
               const double complex[::1] data, const double complex[::1] x,
               double complex[::1] y, int nthreads=1):
    cdef Py_ssize_t nrow = indptr.shape[0] - 1
    cdef Py_ssize_t r
    cdef int p
    cdef double complex acc
    for r in prange(nrow, nogil=True, num_threads=nthreads, schedule="static"):
        acc = 0
        for p in range(indptr[r], indptr[r + 1]):
            acc = acc + data[p] * x[indices[p]]
        y[r] = acc
    return y
