"""Backend selection for the hot numeric kernels.

Kernels in :mod:`polydrive.kernels` are written as plain scalar-loop
functions over numpy arrays.  By default they are JIT-compiled with numba;
setting the environment variable ``POLYDRIVE_NUMBA=0`` (before import)
selects the pure-Python/numpy fallback, which computes the exact same
floating point operations in the same order.
"""

from __future__ import annotations

import os

_ENV_FLAG = "POLYDRIVE_NUMBA"


def numba_requested() -> bool:
    return os.environ.get(_ENV_FLAG, "1").lower() not in ("0", "false", "off", "no")


_numba_njit = None
if numba_requested():
    try:
        from numba import njit as _numba_njit  # noqa: F401
    except ImportError:
        _numba_njit = None

BACKEND = "numba" if _numba_njit is not None else "numpy"


def maybe_njit(fn):
    """JIT-compile ``fn`` when the numba backend is active, else return it as is.

    The jitted function keeps the original accessible as ``.py_func`` (numba
    convention), which the backend benchmark uses for comparison.
    """
    if _numba_njit is None:
        return fn
    return _numba_njit(cache=True)(fn)
