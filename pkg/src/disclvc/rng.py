"""Named, counter-based random streams.

Every stochastic operation takes an explicit ``numpy.random.Generator``.
Streams are derived from ``(seed, *names)`` so that any consumer can be
re-created independently, e.g. the stream for training step 1234 does not
depend on how many numbers earlier steps consumed.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` and a path of names/ints."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(n) for n in names]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))
