"""Backend selection for the hot numeric kernels.

Set ``NEUROLOC_NUMBA=0`` before import to force the pure-numpy path.
If numba cannot be imported the numpy path is used silently.
"""

import os

_flag = os.environ.get("NEUROLOC_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = bool(_requested and _numba is not None)
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is available, identity otherwise.

    Kernels are always compiled when numba is importable so the benchmark can
    compare both paths in one process; dispatch is decided by ``USE_NUMBA``.
    """
    if _numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    return _numba.njit(*args, **kwargs)


HAVE_NUMBA = _numba is not None
