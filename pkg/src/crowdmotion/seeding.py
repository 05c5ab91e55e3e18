"""Named random streams derived from a single root seed.

Every source of randomness in the package (data generation, weight
initialization, batch sampling, placement) pulls from its own named stream so
that changing how one consumer draws numbers never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(root_seed: int, name: str) -> int:
    """Derive a stable 63-bit seed for the stream `name` from `root_seed`."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stream_rng(root_seed: int, name: str) -> np.random.Generator:
    """A numpy Generator seeded from the named stream."""
    return np.random.default_rng(stream_seed(root_seed, name))
