"""Counter-based random streams.

Each stream is a Philox generator keyed by the run seed with the stream
identifiers packed into the upper counter words, so a mask depends only on
``(seed, ids)`` and never on the order in which streams are consumed.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, *ids: int) -> np.random.Generator:
    if len(ids) > 3:
        raise ValueError("at most three stream identifiers")
    words = [0] + [int(i) & _MASK64 for i in ids] + [0] * (3 - len(ids))
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64,
                                                counter=np.array(words, dtype=np.uint64)))


def keep_mask(shape, rate: float, seed: int, *ids: int) -> np.ndarray:
    """Bernoulli(1 - rate) keep mask as float64."""
    return (stream(seed, *ids).random(shape) >= rate).astype(np.float64)
