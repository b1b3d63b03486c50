"""Numba-accelerated kernels, bit-identical to the numpy reference.

Each function mirrors the per-element operation sequence of
`_kernels_numpy`.  The default njit configuration (``fastmath=False``) is
load-bearing: it forbids FMA contraction and accumulator splitting, which is
what keeps the scalar loops here bit-identical to the vectorized reference.
Do not enable fastmath on any kernel in this file.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ._kernels_numpy import (
    EXP_COEFFS,
    EXP_OVERFLOW,
    EXP_UNDERFLOW,
    FNV_OFFSET,
    FNV_PRIME,
    INV_LN2,
    LN2_HI,
    LN2_LO,
    LOG_COEFFS,
    SQRT_HALF,
)

# Frozen as arrays: numba embeds global ndarrays as compile-time constants,
# which sidesteps version differences around dynamic tuple indexing.
_EXP_C = np.array(EXP_COEFFS, dtype=np.float64)
_LOG_C = np.array(LOG_COEFFS, dtype=np.float64)


@njit(cache=True, nogil=True)
def _matmul_into(a, b, out):
    m, kk = a.shape
    n = b.shape[1]
    for i in range(m):
        for t in range(kk):
            av = a[i, t]
            for j in range(n):
                out[i, j] += av * b[t, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    _matmul_into(a, b, out)
    return out


@njit(cache=True, nogil=True)
def _colsum_into(x, out):
    m, n = x.shape
    for r in range(m):
        for j in range(n):
            out[j] += x[r, j]


def colsum(x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[1], dtype=x.dtype)
    _colsum_into(x, out)
    return out


@njit(cache=True, nogil=True)
def _exp_scalar(x):
    if x != x:
        return x
    if x > EXP_OVERFLOW:
        return math.inf
    if x < EXP_UNDERFLOW:
        return 0.0
    k = math.floor(x * INV_LN2 + 0.5)
    r = (x - k * LN2_HI) - k * LN2_LO
    p = _EXP_C[0]
    for idx in range(1, _EXP_C.shape[0]):
        p = p * r + _EXP_C[idx]
    return math.ldexp(p, int(k))


@njit(cache=True, nogil=True)
def exp_f64(x):
    out = np.empty(x.shape[0], dtype=np.float64)
    for i in range(x.shape[0]):
        out[i] = _exp_scalar(x[i])
    return out


@njit(cache=True, nogil=True)
def _log_scalar(x):
    if x != x or x < 0.0:
        return math.nan
    if x == 0.0:
        return -math.inf
    if x == math.inf:
        return math.inf
    m, e = math.frexp(x)
    if m < SQRT_HALF:
        m *= 2.0
        e -= 1
    s = (m - 1.0) / (m + 1.0)
    z = s * s
    p = _LOG_C[0]
    for idx in range(1, _LOG_C.shape[0]):
        p = p * z + _LOG_C[idx]
    r = 2.0 * s * p
    return e * LN2_HI + (r + e * LN2_LO)


@njit(cache=True, nogil=True)
def log_f64(x):
    out = np.empty(x.shape[0], dtype=np.float64)
    for i in range(x.shape[0]):
        out[i] = _log_scalar(x[i])
    return out


@njit(cache=True, nogil=True)
def _fnv1a64(data, h0):
    h = h0
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * np.uint64(FNV_PRIME)
    return h


def fnv1a64(data: np.ndarray, h0: int = FNV_OFFSET) -> int:
    return int(_fnv1a64(data, np.uint64(h0)))
