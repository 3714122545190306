"""Seeded random streams.

Every stream is a numpy ``Generator`` over the PCG64 bit generator, keyed by
a tuple of non-negative integers through ``SeedSequence``.  PCG64 output is
fixed by its published algorithm, so a key yields the same numbers on every
platform.  The first key element is the user seed; the second names the
purpose of the stream.
"""
import numpy as np

DATA = 0
CLIENT_SPLIT = 1
SAMPLE_SPLIT = 2
GOSSIP = 3
INIT = 4
SHUFFLE = 5
METRIC_PICK = 6


def make_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))
