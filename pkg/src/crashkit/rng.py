"""Seed handling.

Every command takes one 64-bit seed. Independent streams are derived from it by
SplitMix64 mixing of the seed with a stable hash of a stream label, and each
stream drives a numpy ``PCG64`` generator. Both algorithms are fully specified,
so a given seed yields the same numbers on every platform.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *labels: str | int) -> int:
    state = seed & MASK64
    state, out = splitmix64(state)
    for label in labels:
        tag = zlib.crc32(str(label).encode("utf-8"))
        state, out = splitmix64(state ^ out ^ tag)
    return out


def make_rng(seed: int, *labels: str | int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))
