"""Deterministic RNG derivation.

All randomness in the package flows from a single integer seed plus a list
of context keys (epoch number, instance index, a stream name, ...).  The
same keys always yield the same generator, independent of call order, so
serial and parallel execution agree and interrupted runs can resume
bit-identically.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_rng(*keys) -> np.random.Generator:
    """Generator keyed by the given (seed, context...) tuple.

    Keys may be ints or strings; strings are hashed with sha256 so the
    mapping is stable across processes and platforms.
    """
    entropy = [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
