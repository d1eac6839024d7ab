"""Deterministic random-stream derivation.

Every stochastic operation receives an explicit ``numpy.random.Generator``.
Streams are derived from one experiment seed plus a string/integer key path,
so any component can rebuild its own stream without coordinating draw order
with the rest of the program. Runs are bit-reproducible from the seed alone.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_ints(key) -> int:
    if isinstance(key, int):
        return key & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def rng_for(seed: int, *key) -> np.random.Generator:
    """Generator for the stream identified by ``key`` under ``seed``.

    The same (seed, key) pair always yields the same stream; distinct keys
    yield statistically independent streams.
    """
    spawn_key = tuple(_key_to_ints(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key))
