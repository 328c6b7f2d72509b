"""Deterministic seed derivation.

All randomness in the package flows from one master seed.  Child seeds are
derived from structured keys (split index, fold index, task name, ...) via
``numpy.random.SeedSequence`` so results do not depend on execution order or
worker scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def child_seed(master_seed: int, *key) -> int:
    """Stable 63-bit seed for the sub-unit identified by ``key``."""
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(p) for p in key]
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def rng_from(master_seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(child_seed(master_seed, *key))
