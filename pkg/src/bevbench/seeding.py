"""64-bit seed derivation.

Every random stream in the benchmark is keyed by an explicit unsigned 64-bit
seed. Child seeds are derived with the SplitMix64 finalizer so that adding a
scene or a stream never reshuffles the seeds of existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """SplitMix64 output function applied to ``x`` (mod 2**64)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int | str) -> int:
    """Fold ``keys`` into ``seed`` one at a time.

    String keys are reduced with CRC32 first, which is stable across Python
    processes (unlike ``hash``).
    """
    out = seed & MASK64
    for key in keys:
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        out = splitmix64(out ^ splitmix64(key & MASK64))
    return out


def scene_seed(master_seed: int, index: int) -> int:
    return derive_seed(master_seed, index)


def rng_for(seed: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys) if keys else seed & MASK64)
