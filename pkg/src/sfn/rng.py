"""Deterministic random number streams.

All randomness in the package flows through counter-based Philox
generators keyed by ``(seed, stream)``.  A given key always yields the
same sequence regardless of thread count or the order in which other
streams are consumed, which is what makes synthetic fields and sampled
grids reproducible from their recorded seeds alone.
"""

import numpy as np

_MASK64 = (1 << 64) - 1

# Salts keep independent consumers of the same user seed decorrelated.
STREAM_FIELD = 0x0
STREAM_PLACEMENT = 0x504C414E
STREAM_ROTATION_GRID = 0x524F5447
STREAM_RANDOM_PICKS = 0x52504B53
STREAM_TRUNC_SAMPLER = 0x54525543
STREAM_EM_INIT = 0x454D4954
STREAM_SPLIT = 0x53504C54
STREAM_REFINE = 0x52464E45


def generator(seed, stream=0):
    """Return a ``numpy.random.Generator`` for the ``(seed, stream)`` key."""
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
