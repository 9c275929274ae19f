"""Deterministic named RNG sub-streams.

Every source of randomness in the package derives from a single 64-bit
run seed plus a tuple of string/int tags, so results never depend on
call order, batch composition, or scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *tags: object) -> np.random.Generator:
    """Return an independent generator for (seed, *tags).

    The mapping is stable across platforms and sessions (SHA-256 based).
    """
    h = hashlib.sha256()
    h.update((int(seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little", signed=False))
    for tag in tags:
        h.update(b"\x1f")
        h.update(repr(tag).encode("utf-8"))
    words = np.frombuffer(h.digest(), dtype=np.uint32)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words.tolist())))
