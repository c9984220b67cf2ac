"""Counter-based random streams keyed by (seed, purpose, step)."""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, purpose: str, step: int = 0, index: int = 0) -> np.random.Generator:
    """Independent Philox stream for one (seed, purpose, step, index) key.

    Streams never share state, so the order in which callers draw from
    them cannot change any other stream's output.
    """
    digest = hashlib.sha256(f"{int(seed)}|{purpose}|{int(step)}|{int(index)}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
