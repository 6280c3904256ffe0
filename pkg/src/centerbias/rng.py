"""Deterministic seed derivation for independent per-index random streams."""

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(seed: int, index: int) -> int:
    """Mix (seed, index) into a decorrelated 64-bit sub-seed.

    splitmix64 finalizer applied to seed + (index + 1) * gamma.  Any item of a
    stream can be re-derived in isolation, so generation order and worker
    count never change results.
    """
    z = (seed + (index + 1) * _GAMMA) & _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """PCG64 generator seeded from splitmix64(seed, index)."""
    return np.random.Generator(np.random.PCG64(splitmix64(seed, index)))
