"""Compiled kernels against the numpy/scipy fallback on a twisted bilayer disk.

    python benchmarks/bench_kernels.py [--R 60 80 100] [--repeat 5] [--threads 1 4]

Prints one line per (kernel, R, backend) with the best wall time and checks
that both backends return the same pairs and matvec result.
"""
import argparse
import time

import numpy as np

from moire_lab import _fallback
from moire_lab.geometry import build_site_table, make_lattice
from moire_lab.hopping import IntralayerModel
from moire_lab.tightbinding import assemble

try:
    from moire_lab import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t0)
    return min(ts), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--R", type=float, nargs="+", default=[40.0, 80.0, 120.0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, nargs="+", default=[1, 4])
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not available; only the fallback is timed")
    spec = make_lattice()
    intra = IntralayerModel()
    rc = 7.0
    print(f"{'kernel':<12}{'R_A':>8}{'sites':>9}{'backend':>12}{'time_ms':>11}{'speedup':>9}")
    for R in args.R:
        sites = build_site_table(spec, R)
        pos = np.ascontiguousarray(sites.positions)
        n = len(pos)
        tf, (If, Jf) = best_of(lambda: _fallback.pair_search(pos, rc), args.repeat)
        print(f"{'pair_search':<12}{R:>8.1f}{n:>9d}{'python':>12}{1e3 * tf:>11.2f}{1.0:>9.2f}")
        if _kernels is not None:
            tc, (Ic, Jc) = best_of(lambda: _kernels.pair_search(pos, rc), args.repeat)
            same = (set(zip(*np.sort(np.stack([If, Jf]), 0))) ==
                    set(zip(*np.sort(np.stack([np.asarray(Ic), np.asarray(Jc)]), 0))))
            print(f"{'pair_search':<12}{R:>8.1f}{n:>9d}{'cython':>12}{1e3 * tc:>11.2f}"
                  f"{tf / tc:>9.2f}{'' if same else '  MISMATCH'}")

        H = assemble(sites, intra, None).matrix.tocsr()
        indptr = H.indptr.astype(np.int32)
        indices = H.indices.astype(np.int32)
        data = H.data.astype(complex)
        rng = np.random.default_rng(0)
        x = rng.normal(size=n) + 1j * rng.normal(size=n)
        y = np.empty(n, complex)
        tf, yf = best_of(lambda: _fallback.csr_matvec(indptr, indices, data, x, y.copy()), args.repeat)
        print(f"{'csr_matvec':<12}{R:>8.1f}{n:>9d}{'python':>12}{1e3 * tf:>11.3f}{1.0:>9.2f}")
        if _kernels is not None:
            for nt in args.threads:
                tc, yc = best_of(lambda: _kernels.csr_matvec(indptr, indices, data, x, y.copy(), nt),
                                 args.repeat)
                err = np.abs(np.asarray(yc) - yf).max() / max(np.abs(yf).max(), 1e-300)
                print(f"{'csr_matvec':<12}{R:>8.1f}{n:>9d}{f'cython x{nt}':>12}{1e3 * tc:>11.3f}"
                      f"{tf / tc:>9.2f}{'' if err < 1e-13 else f'  MISMATCH {err:.1e}'}")


if __name__ == "__main__":
    main()
