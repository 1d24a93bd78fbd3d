"""Named, independent random streams fanned out from one global seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for consumer ``name``; ``extra`` ints (e.g. a step index) refine it."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(x) for x in extra)
    return np.random.default_rng(key)
