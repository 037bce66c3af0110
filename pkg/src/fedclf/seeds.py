"""Deterministic seed derivation.

Every random stream in an experiment (synthetic data, test split, partition,
model init, per-round per-client training, selection draws) is seeded with a
child seed derived from the single experiment seed.  The derivation rule is

    child = blake2b_64(f"{parent}:{label}:{index}")

so results are reproducible across processes, platforms and scheduling order.
"""

from __future__ import annotations

import hashlib

__all__ = ["split_seed"]


def split_seed(parent: int, label: str, index: int = 0) -> int:
    """Derive a 64-bit child seed from ``parent`` for the given purpose."""
    digest = hashlib.blake2b(
        f"{parent}:{label}:{index}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")
