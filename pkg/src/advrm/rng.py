"""Named random streams.

Every consumer of randomness asks for a generator keyed by the master seed and
a tuple of names (stage, step, entity id ...). Streams are independent of the
order in which they are requested, so parallel or resumed stages see the same
numbers.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _words(name) -> list[int]:
    digest = hashlib.sha256(repr(name).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, *names) -> np.random.Generator:
    seed = int(seed)
    entropy = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    for name in names:
        entropy.extend(_words(name))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *names) -> int:
    """An integer seed for APIs that take ints rather than generators."""
    return int(stream(seed, *names).integers(0, 2**62))
