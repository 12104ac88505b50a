"""
64-bit xorshift generator (Marsaglia), shift triplet (13, 7, 17).

The generator state is an explicit immutable value: every call returns the
drawn value together with the successor state, so reproducibility never
depends on hidden globals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
SHIFTS = (13, 7, 17)


class ZeroStateError(ValueError):
    """The all-zero state is a fixed point of xorshift and is rejected."""


@dataclass(frozen=True)
class XorshiftState:
    state: int

    def __post_init__(self):
        s = int(self.state) & MASK64
        if s == 0:
            raise ZeroStateError("xorshift state must be nonzero")
        object.__setattr__(self, "state", s)

    @classmethod
    def from_seed(cls, seed: int) -> "XorshiftState":
        """Nonzero state from an arbitrary integer seed (0 maps to a fixed constant)."""
        s = int(seed) & MASK64
        return cls(s if s else 0x9E3779B97F4A7C15)


def next_u64(s: XorshiftState) -> tuple[int, XorshiftState]:
    x = s.state
    a, b, c = SHIFTS
    x ^= (x << a) & MASK64
    x ^= x >> b
    x ^= (x << c) & MASK64
    return x, XorshiftState(x)


def steps_per_seed_vector(B: int) -> int:
    """PRNG steps consumed by :func:`draw_seed_vector`: one bit per real axis."""
    return -(-2 * B // 64)


def draw_seed_vector(s: XorshiftState, B: int) -> tuple[np.ndarray, XorshiftState]:
    """Random-sign vector ``u`` with entries in ``{+-1 +- 1j}``.

    Consumes ``ceil(2B/64)`` outputs. Bit ``2b`` of the concatenated
    outputs (LSB first) sets the sign of ``Re u[b]``, bit ``2b+1`` the sign
    of ``Im u[b]``; a set bit means ``-1``.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    bits = 0
    for i in range(steps_per_seed_vector(B)):
        value, s = next_u64(s)
        bits |= value << (64 * i)
    idx = np.arange(2 * B)
    signs = 1 - 2 * ((bits >> idx.astype(object)) & 1).astype(np.int64)
    return (signs[0::2] + 1j * signs[1::2]).astype(np.complex128), s


def seed_vector_signs(s: XorshiftState, B: int) -> tuple[np.ndarray, np.ndarray, XorshiftState]:
    """Same draw as :func:`draw_seed_vector`, as integer sign arrays (re, im)."""
    u, s = draw_seed_vector(s, B)
    return u.real.astype(np.int64), u.imag.astype(np.int64), s
