"""Deterministic seed derivation.

Every random stream is derived from a tuple of (global seed, purpose tags...)
so that results do not depend on worker identity or call order.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(*parts) -> int:
    """Mix an arbitrary tuple of ints/strings into a 63-bit seed."""
    hi, lo = np.random.SeedSequence([_word(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return (int(hi) << 31) | (int(lo) >> 1)


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
