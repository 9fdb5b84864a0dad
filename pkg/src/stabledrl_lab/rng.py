"""Labelled RNG streams: one master seed, independent children per purpose."""
from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label) -> int:
    digest = hashlib.blake2b(repr(label).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed, *labels) -> np.random.SeedSequence:
    base = seed.entropy if isinstance(seed, np.random.SeedSequence) else int(seed)
    return np.random.SeedSequence([base, *(_label_key(x) for x in labels)])


def derive_rng(seed, *labels) -> np.random.Generator:
    """Generator for ``(seed, *labels)``; adding new labels never shifts existing streams."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
