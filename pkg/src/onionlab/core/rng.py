"""Seeded random streams.

All randomness flows through ``numpy.random.Generator`` backed by PCG64
(the 128-bit-state permuted congruential generator, PCG family). Seeds are
expanded with ``SeedSequence`` so sub-streams derived from one root seed are
statistically independent and reproducible.
"""
from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "numpy.PCG64/SeedSequence"


def make_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Generator for ``seed``; extra ``tags`` select an independent sub-stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(derive_seed(seed, *tags))))


def derive_seed(seed: int, *tags: str | int) -> int:
    """Deterministic 64-bit sub-seed: blake2b over the root seed and the tag path."""
    if not tags:
        return int(seed)
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for t in tags:
        h.update(b"/" + str(t).encode())
    return int.from_bytes(h.digest(), "little")
