"""Numba switch.

Hot kernels come in two flavours: an ``@njit`` loop and a vectorised numpy
path.  Set ``TWOPHASE_DISABLE_NUMBA=1`` to force the numpy path (useful when
numba is missing, when debugging, or for benchmarking the two against each
other).
"""

import os

_FLAG = os.environ.get("TWOPHASE_DISABLE_NUMBA", "").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is available, identity otherwise."""
    if HAVE_NUMBA:
        return _numba.njit(cache=True)(fn)
    return fn


def backend():
    return "numba" if USE_NUMBA else "numpy"
