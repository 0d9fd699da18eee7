"""Keyed, counter-based random streams.

Draws for period ``t`` of stream ``s`` come from a Philox generator keyed by
``(seed, s, t // BLOCK)``, so any slice of periods can be produced
independently and in any order (or on any thread) with identical bits.
"""

import numpy as np

BLOCK = 4096

STATE = 0
NOISE = 1
SHOCK = 2
WELFARE = 3


def block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def standard_normals(seed: int, stream: int, start: int, stop: int, width: int) -> np.ndarray:
    """Rows ``start..stop-1`` of an infinite ``(?, width)`` standard-normal array."""
    out = np.empty((stop - start, width))
    if stop <= start:
        return out
    first, last = start // BLOCK, (stop - 1) // BLOCK
    for b in range(first, last + 1):
        rows = block_generator(seed, stream, b).standard_normal((BLOCK, width))
        lo = max(start, b * BLOCK)
        hi = min(stop, (b + 1) * BLOCK)
        out[lo - start:hi - start] = rows[lo - b * BLOCK:hi - b * BLOCK]
    return out
