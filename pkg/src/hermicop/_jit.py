"""Optional numba acceleration.

Set ``HERMICOP_NO_JIT=1`` to force the pure-numpy kernels (useful for
debugging and for platforms without numba).
"""
from __future__ import annotations

import os

_FLAG = os.environ.get("HERMICOP_NO_JIT", "").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """Compile ``func`` with numba when available, otherwise return it as-is."""
    if _numba is None:
        return func
    return _numba.njit(cache=True, fastmath=False)(func)


def thread_cap() -> int:
    """Parallelism cap from ``HERMICOP_THREADS`` (default 1)."""
    raw = os.environ.get("HERMICOP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
