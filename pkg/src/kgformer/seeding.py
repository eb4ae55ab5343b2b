"""Deterministic seed derivation.

Every random draw in the package flows from one root seed. Sub-streams are
named, and the name is hashed into the sub-seed, so adding a new consumer
(e.g. the extra graph-embedding parameters of one experiment arm) never
shifts the draws of any existing consumer.

Expansion: the root seed and a SHA-256 digest of the label path are mixed
through splitmix64 finalizers. Stable across platforms and runs.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 step: advances and finalizes a 64-bit state."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(root: int, *labels: object) -> int:
    """Derive an independent 64-bit sub-seed from a root seed and a label path.

    Labels are joined into a single path string; distinct paths give
    (practically) independent streams.
    """
    path = "/".join(str(l) for l in labels)
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    x = int.from_bytes(digest[:8], "little")
    x ^= root & _MASK
    x = splitmix64(x)
    x = splitmix64(x)
    return x


def rng_for(root: int, *labels: object) -> np.random.Generator:
    """A numpy Generator seeded from ``derive_seed(root, *labels)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(root, *labels)))
