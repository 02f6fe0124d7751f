"""Deterministic RNG streams derived from a single run seed.

Every source of randomness in the package draws from a stream derived from
``(seed, purpose, *indices)``, so results are reproducible regardless of
execution order or thread count.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_ints(parts) -> list[int]:
    out = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            out.append(int(part) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode("utf-8")).digest()
            out.append(int.from_bytes(digest[:4], "little"))
    return out


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """A fresh PCG64 generator keyed by the seed plus a purpose path."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)] + _key_ints(parts))))


def generator_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
