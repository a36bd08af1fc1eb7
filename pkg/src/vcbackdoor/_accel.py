"""Backend switch for the numeric kernels.

Kernels in :mod:`vcbackdoor.kernels` come in two flavours: a numba ``@njit``
loop and a vectorised numpy fallback.  The active one is picked at call time
from a module flag whose initial value comes from ``VCBACKDOOR_NUMBA``
(``0``/``false``/``off`` disables numba).
"""

from __future__ import annotations

import contextlib
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

NUMBA_AVAILABLE = numba is not None

_FALSY = {"0", "false", "no", "off"}
_use_numba = NUMBA_AVAILABLE and os.environ.get("VCBACKDOOR_NUMBA", "1").strip().lower() not in _FALSY


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise a no-op decorator."""
    if NUMBA_AVAILABLE:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def numba_enabled() -> bool:
    return _use_numba


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for the whole process."""
    global _use_numba
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("numba backend requested but numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")


def backend() -> str:
    return "numba" if _use_numba else "numpy"


@contextlib.contextmanager
def use_backend(name: str):
    previous = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
