"""Deterministic random streams derived from one master seed.

Every source of randomness in the package (data generation, parameter
init, diffusion noise, context dropout, sampling) pulls from a named
sub-stream so each component can be reproduced in isolation.
"""

import zlib

import numpy as np


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a generator keyed by (seed, stream name, optional indices).

    The same key always yields the same stream; distinct names or indices
    yield statistically independent streams.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence((int(seed) & 0xFFFFFFFFFFFFFFFF, tag, *indices))
    return np.random.default_rng(ss)


def child_seed(seed: int, name: str, *indices: int) -> int:
    """Derive a 63-bit integer seed for a named child component."""
    return int(substream(seed, name, *indices).integers(0, 2**63))
