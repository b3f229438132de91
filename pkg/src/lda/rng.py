"""Counter-based random number generation.

Every stochastic component draws from its own `numpy.random.Generator`
backed by Philox (a named, counter-based, platform-portable algorithm).
Streams are derived from explicit integer keys, never from global state,
so any episode, batch, or run can be regenerated in isolation.
"""

from __future__ import annotations

import numpy as np

# Stream ids keep independently-derived generators from colliding when they
# share a root seed.
STREAM_RESET = 1
STREAM_CONTROL = 2
STREAM_SAMPLER = 3
STREAM_NOISE = 4
STREAM_INIT = 5
STREAM_EVAL = 6


def philox(*key: int) -> np.random.Generator:
    """Generator for an explicit key tuple. Same key, same stream, any platform."""
    if not key:
        raise ValueError("philox() needs at least one key component")
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


def derive(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Stream `stream` of root `seed`, optionally sub-indexed (e.g. episode #)."""
    return philox(np.uint64(seed), np.uint64(stream), np.uint64(index))
