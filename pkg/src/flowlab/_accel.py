"""Numba switch.

Hot kernels are written twice: a numba ``@njit`` loop nest and a vectorised
numpy fallback.  Set ``FLOWLAB_DISABLE_NUMBA=1`` to force the numpy path
(useful for debugging and for the kernel benchmark).
"""
import os

NUMBA_DISABLED = os.environ.get("FLOWLAB_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency, but stay importable
    numba = None

HAVE_NUMBA = numba is not None and not NUMBA_DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    opts = dict(cache=True, nogil=True, fastmath=False)
    opts.update(kwargs)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    if args and callable(args[0]):
        return numba.njit(**opts)(args[0])
    return numba.njit(*args, **opts)
