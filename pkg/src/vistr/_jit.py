"""Optional numba acceleration for the hot kernels.

numba is used when it imports cleanly and ``VISTR_NUMBA`` is not set to a
false-ish value (``0``, ``false``, ``no``, ``off``). Every jitted kernel has a
pure-numpy twin: rendered masks are identical and kernel matrices agree to
within a few ulps, so the flag only affects speed.
"""

import logging
import os

log = logging.getLogger(__name__)

_FALSE = {"0", "false", "no", "off"}


def numba_requested() -> bool:
    return os.environ.get("VISTR_NUMBA", "1").strip().lower() not in _FALSE


try:
    import numba as _numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and numba_requested()


def njit(func=None, **options):
    """``numba.njit`` when numba is installed, identity otherwise.

    Compilation is lazy, so decorating a kernel costs nothing until the
    jitted path is actually selected.
    """
    options.setdefault("cache", True)
    options.setdefault("nogil", True)

    def wrap(f):
        if not HAVE_NUMBA:
            return f
        return _numba.njit(**options)(f)

    if func is None:
        return wrap
    return wrap(func)
