"""Named, reproducible RNG streams derived from a master seed.

Every consumer asks for a stream by label, e.g. ``stream(seed, "augment", 3)``.
Streams with different labels are statistically independent and do not depend
on the order in which they are requested.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        return int(label) & MASK64
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *labels) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=tuple(_label_key(l) for l in labels))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *labels) -> int:
    """A 63-bit integer seed for APIs that take plain ints."""
    return int(stream(seed, *labels).integers(0, 2**63 - 1))
