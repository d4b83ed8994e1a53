"""Seed derivation for reproducible, independently seeded substreams.

Every emitter draws from its own ``numpy.random.Generator`` backed by PCG64.
Substream seeds are ``mix(seed, key)``: the key string is hashed with 64-bit
FNV-1a and folded into the seed with the SplitMix64 finalizer, so the result
depends only on the two inputs and never on call order or platform.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


def mix(seed: int, key: str) -> int:
    """Derive a 64-bit substream seed from a parent seed and a string key."""
    return splitmix64((seed & MASK64) ^ splitmix64(fnv1a64(key)))


def substream(seed: int, key: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(mix(seed, key)))
