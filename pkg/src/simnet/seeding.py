"""Counter-based random streams.

Every stochastic step in the package draws from a Philox generator keyed
by the experiment seed.  The (stream, index) pair is placed in the high
words of the 256-bit counter, so distinct purposes get disjoint counter
blocks and any stream can be reconstructed independently of draw order.
"""

import numpy as np

STREAM_BASELINE_INIT = 1
STREAM_BASELINE_SHUFFLE = 2
STREAM_SUBSAMPLE = 3
STREAM_ATTACK_MASK = 4
STREAM_SOLVER = 5
STREAM_MODEL_GEN = 6


def derive_rng(seed, stream, index=0):
    """Generator for one purpose (stream) and one occasion (index).

    Streams stay disjoint as long as a single occasion draws fewer than
    2**128 variates.
    """
    if seed < 0 or stream < 0 or index < 0:
        raise ValueError("seed, stream and index must be non-negative")
    bit_gen = np.random.Philox(key=seed, counter=[0, 0, index, stream])
    return np.random.Generator(bit_gen)
