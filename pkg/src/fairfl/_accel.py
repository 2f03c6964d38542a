"""Optional numba acceleration.

Set ``FAIRFL_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time.
"""

import os

_FLAG = os.environ.get("FAIRFL_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG not in ("", "0", "false", "no")

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

NUMBA_ENABLED = NUMBA_AVAILABLE and not DISABLED_BY_ENV


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise."""
    if NUMBA_AVAILABLE:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
