"""Deterministic RNG derivation.

All randomness in the package funnels through `rng_for`, which derives an
independent generator from a global seed plus a purpose key. The derivation
is stable across runs and platforms (crc32 of the key strings feeding a
`SeedSequence`), so any subsystem can be re-seeded reproducibly without
consuming state from a shared generator.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_words(keys: tuple) -> list[int]:
    words = []
    for key in keys:
        if isinstance(key, (int, np.integer)):
            words.append(int(key) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(key).encode("utf-8")))
    return words


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by (global seed, purpose keys); independent per key."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF] + _key_words(keys)))


def spawn_seed(seed: int, *keys) -> int:
    """A derived 32-bit seed, for APIs that take an integer seed."""
    return int(rng_for(seed, *keys).integers(0, 2**32))
