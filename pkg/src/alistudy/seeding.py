"""Labeled sub-seed derivation.

Every random draw in the package comes from a ``numpy.random.Generator`` built
from a master seed plus a tuple of labels, so adding a new consumer (a design,
a replicate) never shifts the stream seen by another one.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """Deterministic 63-bit sub-seed for ``(seed, *labels)``."""
    h = hashlib.sha256(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


def make_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))
