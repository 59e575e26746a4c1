"""Small shared helpers: deterministic seed derivation and rounding."""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1


def derive_seed(*parts: int) -> int:
    """Mix integer parts into a stable 63-bit seed (splitmix64-style).

    Independent of PYTHONHASHSEED, so identical inputs give identical rng
    streams across processes.
    """
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        acc = (acc ^ (p & _MASK)) * 0xBF58476D1CE4E5B9 & _MASK
        acc = (acc ^ (acc >> 27)) * 0x94D049BB133111EB & _MASK
        acc ^= acc >> 31
    return acc & ((1 << 63) - 1)


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves away from zero toward +inf."""
    return int(math.floor(x + 0.5))
