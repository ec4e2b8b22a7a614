"""Keyed, counter-based random streams.

Every consumer derives its own Philox stream from ``(seed, *keys)`` so that
sampling in one place never shifts the draws seen anywhere else, and parallel
workers reproduce serial results.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_words(keys) -> list[int]:
    words = []
    for k in keys:
        if isinstance(k, (int, np.integer)):
            words.append(int(k) & 0xFFFFFFFF)
            words.append((int(k) >> 32) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(k).encode()).digest()
            words.extend(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 8, 4))
    return words


def make_rng(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, *_key_words(keys)])
    return np.random.Generator(np.random.Philox(ss))
