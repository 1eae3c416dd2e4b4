"""Named random streams derived from one master seed.

Each stream is keyed by its name rather than its position, so adding a new
stream (or dropping an unused one) leaves every other stream unchanged.
"""

from __future__ import annotations

import zlib

import numpy as np

TRAIN_STREAMS = ("env", "flicker", "init", "explore", "replay", "glimpse", "blend", "fit")
EVAL_STREAMS = ("eval-env", "eval-flicker", "eval-blend")


def stream(seed: int, name: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def make_streams(seed: int, names=TRAIN_STREAMS) -> dict[str, np.random.Generator]:
    return {name: stream(seed, name) for name in names}
