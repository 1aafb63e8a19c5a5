"""Deterministic named substreams from one root seed.

Every module draws randomness from a substream named after its role, so a
single root seed reproduces the whole pipeline regardless of which commands
run or in what order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the (root, name) substream; stable across platforms."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    seq = np.random.SeedSequence([root_seed & 0xFFFFFFFFFFFFFFFF, *words])
    return np.random.Generator(np.random.PCG64(seq))


def child_seed(root_seed: int, name: str) -> int:
    """64-bit seed for the named substream, for APIs that take plain ints."""
    return int(substream(root_seed, name).integers(0, 2**63 - 1))
