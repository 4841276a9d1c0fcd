"""Seed derivation: every random stream is a hash of the global seed and a purpose key."""

import hashlib

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    payload = repr((int(seed),) + tuple(keys)).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
