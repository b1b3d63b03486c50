"""Deterministic random numbers shared by every party.

PCG32 (XSH-RR 64/32) with splitmix64 seed expansion.  The generator is
implemented here rather than taken from ``numpy.random`` because every party
in a run — limbs, server, and the monolithic reference trainer — must be able
to reproduce exactly the same streams from a documented algorithm, and the
stream for a given purpose must not depend on which process draws it.

Stream discipline: one ``Rng`` per purpose, seeded via ``derive_seed``.  The
derivation is keyed by *what the stream is for* ("limb:3", "perm:17", ...),
never by which party happens to consume it.
"""

from __future__ import annotations

import numpy as np

from . import backend

_MASK64 = 0xFFFFFFFFFFFFFFFF
_PCG_MULT = 6364136223846793005
_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, next_state)."""
    state = (state + _GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    z = z ^ (z >> 31)
    return z, state


def derive_seed(base: int, *parts: object) -> int:
    """Derive a purpose-specific 64-bit seed from a base seed and labels.

    FNV-1a 64 over the canonical key string ``"<base>:<part>:<part>..."``.
    Stable across processes, platforms and backends.
    """
    key = ":".join([str(base & _MASK64)] + [str(p) for p in parts])
    return backend.fnv1a64(key.encode("utf-8"))


class Rng:
    """PCG32: 64-bit LCG state, XSH-RR output, 32-bit draws.

    ``Rng(seed)`` expands the seed with two splitmix64 steps into the initial
    state and the (odd) stream increment.  ``Rng.from_raw(initstate, initseq)``
    reproduces the reference generator's seeding, which the tests check
    against published output vectors.
    """

    __slots__ = ("_state", "_inc")

    def __init__(self, seed: int):
        z1, s = _splitmix64(seed & _MASK64)
        z2, _ = _splitmix64(s)
        self._state = z1
        self._inc = ((z2 << 1) | 1) & _MASK64

    @classmethod
    def from_raw(cls, initstate: int, initseq: int) -> "Rng":
        rng = cls.__new__(cls)
        rng._inc = ((initseq << 1) | 1) & _MASK64
        rng._state = 0
        rng.next_u32()
        rng._state = (rng._state + (initstate & _MASK64)) & _MASK64
        rng.next_u32()
        return rng

    def next_u32(self) -> int:
        old = self._state
        self._state = (old * _PCG_MULT + self._inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def u01(self) -> float:
        """Uniform float64 in [0, 1): one 32-bit draw scaled by 2**-32."""
        return self.next_u32() * 2.0**-32

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) via modulo.

        The modulo has bias of order n/2^32; acceptable here (n is at most a
        dataset size) and kept because the single-draw form is trivial to
        reproduce in any language.
        """
        if n <= 0:
            raise ValueError("below() needs n >= 1")
        return self.next_u32() % n

    def u32_array(self, n: int) -> np.ndarray:
        """n consecutive 32-bit draws as uint32, vectorized.

        Generates the LCG state sequence by block doubling (states, then
        states*A+C with (A, C) squared each round) in uint64 with wraparound,
        applies the XSH-RR output function on the whole block, and finally
        advances the scalar state as if ``next_u32`` had been called n times.
        """
        if n == 0:
            return np.empty(0, dtype=np.uint32)
        states = np.array([self._state], dtype=np.uint64)
        mult = np.uint64(_PCG_MULT)
        add = np.uint64(self._inc)
        with np.errstate(over="ignore"):
            while states.shape[0] < n:
                states = np.concatenate([states, states * mult + add])
                add = add * mult + add
                mult = mult * mult
            states = states[:n]
            xsh = (((states >> np.uint64(18)) ^ states) >> np.uint64(27)).astype(np.uint32)
            rot = (states >> np.uint64(59)).astype(np.uint32)
            out = (xsh >> rot) | (xsh << ((np.uint32(32) - rot) & np.uint32(31)))
        self._state = (int(states[-1]) * _PCG_MULT + self._inc) & _MASK64
        return out

    def u01_array(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1) as float64."""
        return self.u32_array(n).astype(np.float64) * 2.0**-32

    def uniform_array(self, n: int, lo: float, hi: float) -> np.ndarray:
        """n uniforms in [lo, hi) as float64: lo + u01*(hi-lo)."""
        return lo + self.u01_array(n) * (hi - lo)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n), one ``below`` draw per swap."""
        idx = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx
