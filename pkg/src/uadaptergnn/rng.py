"""Named, independent random streams derived from one integer seed.

Each consumer (data, init, noise, shuffle, ...) asks for its own stream by
name, so adding a new consumer never shifts the draws of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the sub-stream ``name`` of root ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=_name_key(name)))


def derive_seed(seed: int, name: str) -> int:
    """A 32-bit child seed, for APIs that take an int rather than a Generator."""
    return int(stream(seed, name).integers(0, 2**31 - 1))
