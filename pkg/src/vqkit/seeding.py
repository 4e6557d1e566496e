"""Deterministic RNG substreams derived from a single experiment seed.

Every random draw in the package flows from one integer seed through named
substreams, so runs are reproducible and resumable without storing generator
state: a stream is a pure function of (seed, name parts).
"""

import zlib

import numpy as np


def derive_seed(seed: int, *parts) -> int:
    """Mix `parts` (strings/ints) into `seed`, returning a new integer seed."""
    h = zlib.crc32(b"vqkit", seed & 0xFFFFFFFF)
    for part in parts:
        h = zlib.crc32(str(part).encode("utf-8"), h)
    return (seed << 32) ^ h


def substream(seed: int, *parts) -> np.random.Generator:
    """A fresh generator for the substream named by `parts`."""
    return np.random.default_rng(np.random.SeedSequence(derive_seed(seed, *parts) & (2**63 - 1)))
