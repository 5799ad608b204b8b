"""Kernel backend selection.

Set ``ACNORM_USE_NUMBA=0`` before importing :mod:`acnorm` to force the
pure-numpy kernels. If numba cannot be imported the numpy path is used
regardless of the flag.
"""
import os

_FLAG = os.environ.get("ACNORM_USE_NUMBA", "1").strip().lower()
REQUESTED = _FLAG not in ("0", "false", "no", "off")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and REQUESTED


def jit(func):
    """Compile ``func`` in nopython mode when numba is importable.

    Compilation is lazy, so wrapping is free when the numpy path is active.
    """
    if HAVE_NUMBA:
        return numba.njit(cache=True)(func)
    return func


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
