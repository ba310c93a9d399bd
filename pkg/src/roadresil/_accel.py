"""Numba switch.

Set ``ROADRESIL_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable.
"""
import logging
import os

logger = logging.getLogger(__name__)

_DISABLED = os.environ.get("ROADRESIL_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError("disabled by ROADRESIL_DISABLE_NUMBA")
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError as exc:
    numba = None
    HAVE_NUMBA = False
    logger.debug("numba unavailable, using numpy kernels: %s", exc)


def njit(func=None, **kwargs):
    """``numba.njit(cache=True)`` when available, identity otherwise."""
    kwargs.setdefault("cache", True)

    def wrap(f):
        if not HAVE_NUMBA:
            return f
        return numba.njit(**kwargs)(f)

    return wrap if func is None else wrap(func)
