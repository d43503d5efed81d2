"""Hierarchical seeded random streams.

Every consumer of randomness asks for a substream keyed by a path such as
``("dn", step, frame, group)``.  Two streams with different paths are
statistically independent, and drawing from one never advances another, so
switching a feature on or off cannot perturb the randomness seen elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"substream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent generator for ``path`` under the run ``seed``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in path))
    return np.random.Generator(np.random.PCG64(seq))
