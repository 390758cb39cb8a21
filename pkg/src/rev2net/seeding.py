"""Stable child-seed derivation.

Every random stream in the package is derived from a root seed plus a purpose
tag, so adding a new consumer never shifts the streams of existing ones.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    """Hash ``(seed, *tags)`` into a non-negative 63-bit integer."""
    key = repr((int(seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
