"""Named, independent random streams derived from one 64-bit seed.

Each stream is a Philox counter-based generator keyed by ``(seed, name)``,
so adding a new consumer never shifts the numbers another consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(key))
