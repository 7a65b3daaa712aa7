"""Named, reproducible random substreams derived from one run seed.

Every source of randomness in a run (init, masking, routing noise, data
order, dropout) draws from its own substream so components can be replayed
in isolation.
"""
from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the (seed, name) substream; stable across platforms."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))
