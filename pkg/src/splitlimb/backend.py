"""Kernel backend selection: numba-accelerated loops or plain numpy.

The two implementations are bit-identical by construction (and by test); the
switch exists so the package runs where numba is unavailable and so the
benchmark suite can compare them.  Selection order:

1. ``SPLITLIMB_BACKEND`` environment variable (``numba`` or ``numpy``),
2. numba if it imports,
3. numpy otherwise.

``use_backend`` switches at runtime; the public kernel wrappers dispatch on
every call, so a switch takes effect immediately.
"""

from __future__ import annotations

import os
from typing import Union

import numpy as np

from . import _kernels_numpy
from ._kernels_numpy import FNV_OFFSET, FNV_PRIME

_ENV_VAR = "SPLITLIMB_BACKEND"
_impl = _kernels_numpy
_name = "numpy"


def _load_numba_kernels():
    from . import _kernels_numba

    return _kernels_numba


def use_backend(name: str) -> str:
    """Select the kernel implementation.  Returns the active backend name."""
    global _impl, _name
    if name == "numpy":
        _impl, _name = _kernels_numpy, "numpy"
    elif name == "numba":
        _impl, _name = _load_numba_kernels(), "numba"
    else:
        raise ValueError(f"unknown backend {name!r}: expected 'numba' or 'numpy'")
    return _name


def current_backend() -> str:
    return _name


def available_backends() -> tuple[str, ...]:
    try:
        _load_numba_kernels()
    except ImportError:
        return ("numpy",)
    return ("numba", "numpy")


def _init_from_env() -> None:
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice:
        use_backend(choice)
        return
    try:
        use_backend("numba")
    except ImportError:
        use_backend("numpy")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two 2-D arrays of the same float dtype, pinned summation order."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D arrays, got {a.ndim}-D and {b.ndim}-D")
    if a.dtype != b.dtype:
        raise ValueError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    return _impl.matmul(a, b)


def colsum(x: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array, rows accumulated top to bottom."""
    if x.ndim != 2:
        raise ValueError(f"colsum expects a 2-D array, got {x.ndim}-D")
    return _impl.colsum(np.ascontiguousarray(x))


def exp_f64(x: np.ndarray) -> np.ndarray:
    """Portable elementwise exp; float64 in, float64 out, any shape."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    return np.asarray(_impl.exp_f64(flat)).reshape(x.shape)


def log_f64(x: np.ndarray) -> np.ndarray:
    """Portable elementwise natural log; float64 in, float64 out, any shape."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    return np.asarray(_impl.log_f64(flat)).reshape(x.shape)


def fnv1a64(data: Union[bytes, bytearray, memoryview, np.ndarray], h0: int = FNV_OFFSET) -> int:
    """FNV-1a 64-bit hash of a byte string or array's raw bytes; chain via h0."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    else:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
    return _impl.fnv1a64(buf, h0)


_init_from_env()

__all__ = [
    "FNV_OFFSET",
    "FNV_PRIME",
    "available_backends",
    "colsum",
    "current_backend",
    "exp_f64",
    "fnv1a64",
    "log_f64",
    "matmul",
    "use_backend",
]
