"""Numba switch.

Set ``ACTCOMPRESS_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
path. Both paths are bit-identical; the flag exists for debugging and for the
benchmark in ``benchmarks/``.
"""

import os

_DISABLED = os.environ.get("ACTCOMPRESS_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    # tbb in this image is too old for numba; omp avoids the warning
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

    prange = range


def use_numba() -> bool:
    return HAVE_NUMBA
