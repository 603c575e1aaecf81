"""Kernel backend selection: compiled extension when importable, otherwise the
numpy/scipy fallback. Set MOIRE_LAB_PURE=1 to force the fallback."""
import os

from . import _fallback

BACKEND = "python"
if os.environ.get("MOIRE_LAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

pair_search = _impl.pair_search
csr_matvec = _impl.csr_matvec
