"""Keyed, stateless random numbers.

Every draw is a pure function of ``(seed, *keys)`` so results do not depend on
call order or on how work is split across threads.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_keys(seed: int, *keys) -> np.ndarray:
    """Hash ``seed`` and broadcastable integer key arrays to uint64."""
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & _MASK) + np.uint64(_GOLDEN))
        for key in keys:
            k = np.asarray(key, dtype=np.int64).astype(np.uint64)
            h = _mix(h ^ (k * np.uint64(_GOLDEN) + np.uint64(0x632BE59BD9B4E019)))
    return h


def counter_uniform(seed: int, *keys) -> np.ndarray:
    """Uniform floats in [0, 1) keyed by ``(seed, *keys)``; 53 bits of resolution."""
    h = hash_keys(seed, *keys)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def keyed_generator(seed: int, *keys: int) -> np.random.Generator:
    """A Philox generator whose stream is selected by ``(seed, *keys)``."""
    entropy = [seed & _MASK] + [int(k) & _MASK for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
