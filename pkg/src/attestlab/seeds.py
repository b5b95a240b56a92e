"""Deterministic seed derivation so every pipeline stage is replayable."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Hash a tuple of ints/strings/bytes into a stable 63-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, bytes):
            h.update(b"b" + p)
        elif isinstance(p, str):
            h.update(b"s" + p.encode("utf-8"))
        elif isinstance(p, (int, np.integer)):
            h.update(b"i" + int(p).to_bytes(16, "little", signed=True))
        else:
            raise TypeError("unsupported seed part type: %r" % type(p))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little") >> 1


def rng(*parts) -> np.random.Generator:
    """Generator seeded from derive_seed(*parts)."""
    return np.random.default_rng(derive_seed(*parts))
