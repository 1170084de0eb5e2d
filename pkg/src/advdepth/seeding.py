"""Named seed splitting.

Every random stream is ``numpy.random.default_rng(SeedSequence([seed, *keys]))``
where each string key is replaced by its CRC-32. A command draws all of its
randomness from one user seed through fixed names, e.g. ``("scene", 7)`` for
the seventh generated scene or ``("init", "arch-A")`` for weight init.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError("integer seed keys must be non-negative")
    return k


def rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *map(_key, keys)]))
