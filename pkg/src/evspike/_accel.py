"""Numba switch.

Set ``EVSPIKE_DISABLE_NUMBA=1`` to run every hot kernel through its pure-numpy
path. The flag is read once at import time.
"""
import os

_flag = os.environ.get("EVSPIKE_DISABLE_NUMBA", "").strip().lower()
DISABLED = _flag in ("1", "true", "yes", "on")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and not DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` with cache/nogil defaults; identity when numba is off.

    The wrapped python function is still compiled lazily, so importing the
    package never pays the JIT cost.
    """
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)

    def wrap(fn):
        if numba is None:
            return fn
        return numba.njit(**kwargs)(fn)

    if len(args) == 1 and callable(args[0]):
        return wrap(args[0])
    return wrap
