"""Labeled seed derivation so every component draws from its own stream."""

import hashlib


def derive_seed(seed: int, label: str) -> int:
    h = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")
