"""Backend selection for the hot kernels.

Set ``FETRACK_DISABLE_NUMBA=1`` to force the pure-numpy path. Both paths are
always importable so tests and benchmarks can compare them in one process.
"""
import os

# TBB in this image is too old for numba; prefer OpenMP, which also tolerates
# kernels launched from several Python threads.
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False

DISABLE_NUMBA = os.environ.get("FETRACK_DISABLE_NUMBA", "").lower() in ("1", "true", "yes", "on")
USE_NUMBA = HAVE_NUMBA and not DISABLE_NUMBA


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or a no-op when numba is missing."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
