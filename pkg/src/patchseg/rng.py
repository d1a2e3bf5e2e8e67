"""Named, reproducible random substreams derived from a single master seed.

Every source of randomness (init, augmentation, batch sampling, branch
dropping) pulls from its own substream so components stay independently
reproducible and a run can be resumed from just (seed, iteration).
"""
from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *parts) -> np.random.Generator:
    """Generator for the substream named by `parts` under `seed`.

    Names are hashed with sha256, not Python's randomized hash, so streams
    are stable across processes and platforms.
    """
    h = hashlib.sha256(str(int(seed)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    words = [int.from_bytes(h.digest()[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *words]))
