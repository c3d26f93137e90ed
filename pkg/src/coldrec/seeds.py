"""Deterministic derivation of independent RNG streams from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(master: int, *keys) -> int:
    """Stable 64-bit seed derived from a master seed and a key path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for k in keys:
        h.update(b"/")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(master: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(child_seed(master, *keys)))
