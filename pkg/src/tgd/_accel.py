"""Optional numba acceleration.

Hot kernels are written once as plain Python loops over numpy arrays and
compiled with ``numba.njit`` when numba is importable.  Setting the
environment variable ``TGD_DISABLE_NUMBA=1`` (before import) forces the
pure-numpy fallback paths, which is what the benchmark compares against.
"""

from __future__ import annotations

import os

_disabled = os.environ.get("TGD_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _disabled:
        raise ImportError
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:
    _njit = None
    NUMBA_AVAILABLE = False


def njit(fn):
    """Compile ``fn`` with numba (cached, nopython) or return ``None``.

    Callers keep a numpy implementation and dispatch on the result.
    """
    if not NUMBA_AVAILABLE:
        return None
    return _njit(cache=True, nogil=True)(fn)
