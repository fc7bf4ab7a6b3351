"""Kernel backend selection.

Hot loops are written twice: an ``@njit`` loop kernel and a vectorized numpy
kernel.  ``MOMENT_FIELDS_BACKEND=numpy`` (or a missing numba install) routes
every dispatcher to the numpy path.  With numba disabled the loop kernels stay
importable as plain Python functions, which is slow but handy for debugging.
"""

import os
import warnings

BACKEND_ENV = "MOMENT_FIELDS_BACKEND"
THREADS_ENV = "MOMENT_FIELDS_THREADS"

try:
    import numba

    # the bundled TBB is too old and numba warns on every parallel launch
    numba.config.THREADING_LAYER = "workqueue"
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get(BACKEND_ENV, "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {_requested!r}")
if _requested == "numba" and not HAVE_NUMBA:
    warnings.warn("numba not importable, falling back to the numpy kernels")
USE_NUMBA = HAVE_NUMBA and _requested == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("fastmath", False)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def set_threads(n):
    """Cap kernel worker threads; results never depend on this value."""
    if n is None:
        n = os.environ.get(THREADS_ENV)
    if n is None:
        return
    n = int(n)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
