"""Numba switch.

Set ``LEAFCASCADE_NUMBA=0`` to force the pure-numpy kernels. When numba is
missing the numpy path is used regardless of the flag.
"""
import os

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def _flag_enabled() -> bool:
    raw = os.environ.get("LEAFCASCADE_NUMBA", "1").strip().lower()
    return raw not in ("0", "false", "no", "off", "")


USE_NUMBA = HAVE_NUMBA and _flag_enabled()

njit = _njit
