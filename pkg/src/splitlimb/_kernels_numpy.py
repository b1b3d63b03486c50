"""Reference kernels: plain numpy, pinned accumulation order.

This module defines the numeric semantics of the package.  Every kernel here
is written so that each output element is produced by one exactly-specified
sequence of IEEE-754 operations:

* ``matmul`` accumulates along k in ascending order, one fused "+= a[i,k]*b[k,j]"
  per term, starting from +0.0.  BLAS is deliberately not used: its blocking
  and vectorization reorder the sum, which breaks bit-level reproducibility
  across shapes and builds.
* ``colsum`` adds rows top to bottom (``np.sum`` would use pairwise summation,
  whose tree shape depends on length).
* ``exp_f64`` / ``log_f64`` are portable transcendentals built only from
  +, -, *, /, ldexp and frexp, so results do not depend on the host libm.

The numba backend (`_kernels_numba`) re-implements the same element-wise
recurrences with explicit loops; the test suite asserts bit-identical output
between the two.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF

# Cody-Waite split of ln 2: LN2_HI has zeros in its low bits, so k*LN2_HI is
# exact for the k range that matters and the reduction r = (x - k*hi) - k*lo
# loses almost no precision.
LN2_HI = 6.93147180369123816490e-01
LN2_LO = 1.90821492927058770002e-10
INV_LN2 = 1.4426950408889634074
SQRT_HALF = 0.70710678118654752440
EXP_OVERFLOW = 709.782712893384
EXP_UNDERFLOW = -745.0

# Taylor coefficients for e^r on |r| <= ln(2)/2, highest order first.
EXP_COEFFS = (
    1.0 / 6227020800.0,
    1.0 / 479001600.0,
    1.0 / 39916800.0,
    1.0 / 3628800.0,
    1.0 / 362880.0,
    1.0 / 40320.0,
    1.0 / 5040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
)

# atanh series for log: ln(m) = 2s(1 + z/3 + z^2/5 + ...), z = s^2.
LOG_COEFFS = (
    1.0 / 15.0,
    1.0 / 13.0,
    1.0 / 11.0,
    1.0 / 9.0,
    1.0 / 7.0,
    1.0 / 5.0,
    1.0 / 3.0,
    1.0,
)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with ascending-k accumulation per output element.

    Equivalent to ``for i: for k: for j: out[i,j] += a[i,k]*b[k,j]``; the
    broadcast form below performs the same per-element operation sequence
    (outer product terms added in ascending k) while letting numpy vectorize
    over i and j.
    """
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    for t in range(kk):
        out += a[:, t : t + 1] * b[t : t + 1, :]
    return out


def colsum(x: np.ndarray) -> np.ndarray:
    """Sum of rows, accumulated top to bottom."""
    m, n = x.shape
    out = np.zeros(n, dtype=x.dtype)
    for r in range(m):
        out += x[r]
    return out


def exp_f64(x: np.ndarray) -> np.ndarray:
    """Portable elementwise exp for 1-D float64 input."""
    # Mask the lanes the scalar form handles via early return, so the bulk
    # computation never overflows ldexp; the where() calls below restore them.
    bad = ~np.isfinite(x) | (x > EXP_OVERFLOW) | (x < EXP_UNDERFLOW)
    xs = np.where(bad, 0.0, x)
    k = np.floor(xs * INV_LN2 + 0.5)
    r = (xs - k * LN2_HI) - k * LN2_LO
    p = np.full_like(r, EXP_COEFFS[0])
    for c in EXP_COEFFS[1:]:
        p = p * r + c
    out = np.ldexp(p, k.astype(np.int64))
    out = np.where(x > EXP_OVERFLOW, np.inf, out)
    out = np.where(x < EXP_UNDERFLOW, 0.0, out)
    out = np.where(np.isnan(x), np.nan, out)
    return out


def log_f64(x: np.ndarray) -> np.ndarray:
    """Portable elementwise natural log for 1-D float64 input."""
    bad = ~(np.isfinite(x) & (x > 0.0))
    xs = np.where(bad, 1.0, x)
    m, e = np.frexp(xs)
    adj = m < SQRT_HALF
    m = np.where(adj, m * 2.0, m)
    e = np.where(adj, e - 1, e).astype(np.float64)
    s = (m - 1.0) / (m + 1.0)
    z = s * s
    p = np.full_like(z, LOG_COEFFS[0])
    for c in LOG_COEFFS[1:]:
        p = p * z + c
    r = 2.0 * s * p
    out = e * LN2_HI + (r + e * LN2_LO)
    out = np.where(x == 0.0, -np.inf, out)
    out = np.where(x < 0.0, np.nan, out)
    out = np.where(np.isposinf(x), np.inf, out)
    out = np.where(np.isnan(x), np.nan, out)
    return out


def fnv1a64(data: np.ndarray, h0: int = FNV_OFFSET) -> int:
    """FNV-1a 64-bit hash over a uint8 array.  Chainable via ``h0``."""
    h = h0
    for byte in data.tobytes():
        h ^= byte
        h = (h * FNV_PRIME) & _U64_MASK
    return h
