"""Numba availability switch.

Set ``INVLAB_NUMBA=0`` to force the pure-numpy kernels even when numba is
installed. The flag is read once, at import time.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None

_FLAG = os.environ.get("INVLAB_NUMBA", "1").strip().lower()

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
