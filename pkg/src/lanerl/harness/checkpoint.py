"""Checkpoint files: resolved config, trainer counters, RNG states and agent tensors."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..nn_engine import CheckpointFormatError, read_container, write_container

CHECKPOINT_FORMAT = 1


def save_checkpoint(path: str | Path, config_text: str, agent_kind: str, seed: int, trainer_meta: dict,
                    tensors: dict[str, np.ndarray]) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "agent": agent_kind,
        "seed": seed,
        "config": config_text,
        "trainer": trainer_meta,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        write_container(fh, meta, tensors)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path) as fh:
        meta, tensors = read_container(fh)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"checkpoint format {meta.get('format')!r}, expected {CHECKPOINT_FORMAT}")
    for key in ("agent", "seed", "config", "trainer"):
        if key not in meta:
            raise CheckpointFormatError(f"checkpoint metadata lacks {key!r}")
    return meta, tensors
