"""Deterministic per-item seed derivation.

Each item's generator is seeded from ``(global_seed, item_key)`` so adding or
removing items never reshuffles the randomness of the others. Keys are
hashed with BLAKE2b-64 and combined with the global seed through the
SplitMix64 finalizer.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def key_hash(key) -> int:
    if isinstance(key, int):
        key = str(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def item_seed(global_seed: int, key) -> int:
    """64-bit seed for one item: ``splitmix64(splitmix64(seed) ^ blake2b64(key))``."""
    return splitmix64(splitmix64(int(global_seed) & MASK64) ^ key_hash(key))


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & MASK64))
