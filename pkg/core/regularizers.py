"""
Dropout-family baselines applied to stage outputs in training mode.

dropout / spatial_dropout go on the penultimate stage, dropblock on the first
two stages. Kept activations are rescaled so the expected sum is unchanged.
"""
import numpy as np

from core import ops
from core.errors import ConfigurationError
from core.rng import RngStream

REGULARIZERS = ("none", "dropout", "spatial_dropout", "dropblock")


def dropout(x, rate, rng: RngStream):
    keep = (rng.next_generator().random(x.shape) >= rate).astype(x.dtype)
    return ops.scale(ops.elementwise_mul(x, keep), 1.0 / (1.0 - rate))


def spatial_dropout(x, rate, rng: RngStream):
    n, c = x.shape[:2]
    keep = (rng.next_generator().random((n, c)) >= rate).astype(x.dtype)
    return ops.scale(ops.elementwise_mul(x, keep[:, :, None, None]), 1.0 / (1.0 - rate))


def dropblock(x, rate, block_size, rng: RngStream):
    n, c, h, w = x.shape
    block = min(block_size, h, w)
    valid_h, valid_w = h - block + 1, w - block + 1
    gamma = rate / (block * block) * (h * w) / (valid_h * valid_w)
    seeds = np.zeros((n, c, h, w), dtype=bool)
    offset = block // 2
    seeds[:, :, offset:offset + valid_h, offset:offset + valid_w] = (
        rng.next_generator().random((n, c, valid_h, valid_w)) < gamma
    )
    dropped = np.zeros_like(seeds)
    lo, hi = -offset, block - offset
    for dy in range(lo, hi):
        for dx in range(lo, hi):
            shifted = np.roll(np.roll(seeds, dy, axis=2), dx, axis=3)
            dropped |= shifted
    keep = (~dropped).astype(x.dtype)
    kept = keep.sum()
    out = ops.elementwise_mul(x, keep)
    return ops.scale(out, keep.size / kept) if kept else out


def stage_hook(name, rate, block_size, rng: RngStream, stage_ids):
    """A `(stage_id, tensor) -> tensor` hook for the model's training forward, or None."""
    if name == "none":
        return None
    if name not in REGULARIZERS:
        raise ConfigurationError(f"unknown regularizer {name!r}; choose from {REGULARIZERS}")
    if not 0.0 < rate < 1.0:
        raise ConfigurationError(f"drop_rate must be in (0, 1), got {rate}")
    penultimate = stage_ids[-2]
    targets = set(stage_ids[:2]) if name == "dropblock" else {penultimate}

    def hook(stage_id, x):
        if stage_id not in targets:
            return x
        if name == "dropout":
            return dropout(x, rate, rng)
        if name == "spatial_dropout":
            return spatial_dropout(x, rate, rng)
        return dropblock(x, rate, block_size, rng)

    return hook
