"""Seeded random streams.

Every stream is a PCG64 bit generator keyed by ``SeedSequence(seed,
spawn_key=key)``, where the key is a tuple of non-negative integers. Named
streams hash their name to an integer with CRC32 so keys stay stable across
interpreters (``hash()`` is salted per process).
"""
from __future__ import annotations

import zlib

import numpy as np

STREAM_KINETICS = "kinetics"
STREAM_COUNTER = "counter"
STREAM_STAGE = "stage"
STREAM_SPLITTER = "splitter"
STREAM_PHOTONS = "photons"


def _key_part(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    # SeedSequence keys must be non-negative
    return value if value >= 0 else (1 << 32) + value


def stream(seed: int, *key) -> np.random.Generator:
    if seed is None:
        raise ValueError("an explicit integer seed is required")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_part(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
