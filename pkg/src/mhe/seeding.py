"""Hierarchical RNG derivation: one root seed per run, split per component.

Every random decision in the package draws from a generator obtained via
``spawn_rng(root, *path)`` so that runs replay bit-identically and distinct
components (scene i of split s, epoch e shuffle, pair sampling at step t)
consume disjoint streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def path_hash(*path: object) -> int:
    """Stable 64-bit hash of a path of repr-able components."""
    h = hashlib.blake2b(digest_size=8)
    for part in path:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def spawn_rng(root_seed: int, *path: object) -> np.random.Generator:
    """Generator for the stream identified by (root_seed, *path)."""
    entropy = [int(root_seed) & _MASK64]
    if path:
        entropy.append(path_hash(*path))
    return np.random.default_rng(np.random.SeedSequence(entropy))
