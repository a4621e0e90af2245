"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` version and a vectorised
numpy version. ``QXKIT_DISABLE_NUMBA=1`` (or a missing numba install)
selects the numpy path at import time. ``QUANTX_THREADS`` caps the CLI's
per-tensor worker pool; the kernels themselves are serial.
"""
import os

_FALSE = {"", "0", "false", "no", "off"}


def _flag(name):
    return os.environ.get(name, "").strip().lower() not in _FALSE


try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


USE_NUMBA = HAVE_NUMBA and not _flag("QXKIT_DISABLE_NUMBA")
BACKEND = "numba" if USE_NUMBA else "numpy"


def max_threads():
    raw = os.environ.get("QUANTX_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)

