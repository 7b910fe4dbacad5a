from __future__ import annotations
import hashlib
from typing import Any

MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *keys: Any) -> int:
    """
    Component seed = seed XOR blake2b(keys), 64-bit unsigned.
    Stable across processes and Python versions (no builtin hash()).
    """
    digest = hashlib.blake2b(repr(keys).encode("utf-8"), digest_size=8).digest()
    return (int(seed) & MASK64) ^ int.from_bytes(digest, "little")
