"""Numba switch for the hot kernels.

Set ``FLUCTCREDIT_DISABLE_NUMBA=1`` to force the pure-numpy fallbacks. The
flag is read once at import time; :func:`use_numba` reports the decision.
"""

import os

_DISABLED = os.environ.get("FLUCTCREDIT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def use_numba() -> bool:
    return HAS_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator.

    Kernels decorated here are always callable; whether the compiled or the
    interpreted version is *dispatched* is decided by the callers through
    :func:`use_numba`.
    """
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
