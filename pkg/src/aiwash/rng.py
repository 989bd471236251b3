"""Counter-based random streams keyed by entity.

Each ``(master_seed, kind, *ids)`` tuple maps to its own Philox key, so a
draw never depends on how many other entities were generated before it or
in which order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(master_seed: int, kind: str, *ids) -> int:
    text = "|".join([str(int(master_seed)), kind, *map(str, ids)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:16], "little")


def stream(master_seed: int, kind: str, *ids) -> np.random.Generator:
    """Independent generator for one entity."""
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, kind, *ids)))
