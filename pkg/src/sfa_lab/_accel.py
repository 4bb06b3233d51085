"""Backend selection for the hot kernels.

Set ``SFA_LAB_DISABLE_NUMBA=1`` to force the pure-numpy path. When numba is
not importable the numpy path is used regardless.
"""
import os

try:
    import numba as nb
except ImportError:  # pragma: no cover
    nb = None

NUMBA_AVAILABLE = nb is not None
JIT_DISABLED = os.environ.get("SFA_LAB_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
USE_NUMBA = NUMBA_AVAILABLE and not JIT_DISABLED


def njit(*args, **kwargs):
    if NUMBA_AVAILABLE:
        return nb.njit(*args, **kwargs)

    def deco(func):
        return func

    if args and callable(args[0]):
        return args[0]
    return deco


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
