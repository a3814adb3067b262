"""Deterministic derivation of independent random seeds.

Every random decision in the package draws from a seed produced by
:func:`derive_seed`, so that runs are bitwise reproducible and the
streams for unrelated purposes (init, shuffling, widening, ...) never
collide even when they share the same root seed.
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Finalizer from the splitmix64 generator; full 64-bit avalanche.
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return (x ^ (x >> 31)) & _MASK


def derive_seed(root: int, *parts: int | str) -> int:
    """Derive a 64-bit seed from ``root`` and a label path.

    Equal inputs always give equal outputs; changing any part (or its
    position) yields an unrelated stream.  String parts are hashed, so
    tags like ``"shuffle"`` and client/round indices can be mixed freely.
    """
    state = root & _MASK
    for part in parts:
        if isinstance(part, str):
            digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
            part = int.from_bytes(digest, "big")
        elif not isinstance(part, int):
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
        state = _splitmix64(state ^ (part & _MASK))
    return state
