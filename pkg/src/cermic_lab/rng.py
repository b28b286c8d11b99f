"""Named random streams derived from a single root seed."""
from __future__ import annotations

import hashlib

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def stream_seed(root: int, purpose: str, index: int = 0) -> int:
    digest = hashlib.blake2b(f"{int(root)}|{purpose}|{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(root: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent generator for (root, purpose, index)."""
    return np.random.default_rng(stream_seed(root, purpose, index))


def splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
        return z ^ (z >> np.uint64(31))


def counter_uniform(key: int, *counters) -> np.ndarray:
    """Stateless uniforms in [0, 1) from a key and broadcastable integer counters.

    The same (key, counters) always yields the same value regardless of call
    order, which keeps parallel rollouts reproducible.
    """
    h = np.uint64(key & 0xFFFFFFFFFFFFFFFF)
    h = splitmix64(h)
    for c in counters:
        c = np.asarray(c).astype(np.uint64)
        with np.errstate(over="ignore"):
            h = splitmix64(h ^ splitmix64(c))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
