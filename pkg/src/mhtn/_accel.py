"""Backend selection for the compiled kernels.

Set ``MHTN_DISABLE_NUMBA=1`` to force the pure-numpy path. If numba cannot be
imported the numpy path is used automatically.
"""

from __future__ import annotations

import os

_DISABLED = os.environ.get("MHTN_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator.

    The decorated function is always compiled lazily, so importing this module
    never triggers JIT work even when the numpy path is active.
    """
    if _njit is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    return _njit(*args, **kwargs)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
