"""Kernel backend selection.

Hot loops are written once in plain Python/numpy and optionally compiled with
numba. Set ``CONCAT_LAB_NUMBA=0`` to force the pure-numpy path (also used when
numba is not importable).
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("CONCAT_LAB_NUMBA", "1").strip().lower() not in (
    "0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba when available, else return it unchanged."""
    if not NUMBA_AVAILABLE:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
