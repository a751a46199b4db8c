"""Deterministic randomness: counter-based hash streams and seeded generators.

All randomness in a run derives from a single u64 seed. Sub-seeds are derived
by hashing purpose strings and integer keys, so every component gets an
independent stream and results never depend on call order or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def mix64(x):
    """SplitMix64 finalizer: a bijective avalanche over u64 (scalar or array)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64)
        z = z + _GOLDEN
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


def _fold(part) -> np.uint64:
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return _U64(int.from_bytes(digest, "little"))
    return _U64(int(part) & 0xFFFFFFFFFFFFFFFF)


def hash_key(*parts) -> int:
    """Fold integer and string parts into one u64 stream key."""
    h = _U64(0)
    for part in parts:
        h = mix64(h ^ _fold(part))
    return int(h)


def stream_u64(key, counter):
    """counter-th raw u64 of the SplitMix64 stream seeded by `key`.

    `key` may be a scalar or an array (vectorized over walks); `counter`
    likewise. Fully stateless, so workers can draw any element independently.
    """
    k = np.asarray(key, dtype=np.uint64)
    c = np.asarray(counter, dtype=np.uint64)
    return mix64(k + c * _GOLDEN)


def stream_uniform(key, counter):
    """Uniform float64 in [0, 1) drawn from the (key, counter) cell."""
    bits = stream_u64(key, counter)
    return (bits >> _U64(11)).astype(np.float64) * (2.0**-53)


def substream(*parts) -> np.random.Generator:
    """Independent numpy Generator keyed by the given parts."""
    return np.random.Generator(np.random.PCG64(hash_key(*parts)))
