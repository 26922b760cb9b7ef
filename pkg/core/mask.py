"""
Binary segmentation masks.

Box masks follow the CutMix sampler: lambda ~ U(0, 1), the box center is
uniform over the feature map and each side is scaled by sqrt(1 - lambda), so
the unclipped area ratio is 1 - lambda. The box is clipped to the map.

Point (dropout-like) and channel (spatial-dropout-like) masks keep the same
expected coverage, 1 - lambda.
"""
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from core.errors import ConfigurationError
from core.rng import RngStream


class MaskKind(str, Enum):
    BOX = "box"
    POINT = "point"
    CHANNEL = "channel"


class Pairing(str, Enum):
    COMPLEMENTARY = "complementary"
    NON_COMPLEMENTARY = "non_complementary"


@dataclass(frozen=True)
class SeedDraw:
    stream: str
    counter: int


@dataclass(frozen=True)
class BoxCoords:
    r_x: float
    r_y: float
    r_w: float
    r_h: float
    lam: float
    draw: Optional[SeedDraw] = None

    def unclipped_area_ratio(self, W, H):
        return self.r_w * self.r_h / (W * H)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """
    A 0/1 mask. `spatial` is (H, W), or (N, H, W) when drawn per sample;
    `channel_bits` is (C,) or (N, C).
    """

    kind: MaskKind
    spatial: Optional[np.ndarray] = None
    channel_bits: Optional[np.ndarray] = None
    coords: Optional[BoxCoords] = None
    seed_draw: Optional[SeedDraw] = None

    @property
    def values(self):
        return self.channel_bits if self.kind is MaskKind.CHANNEL else self.spatial

    @property
    def per_sample(self):
        return self.values.ndim == (2 if self.kind is MaskKind.CHANNEL else 3)

    def as_factor(self):
        """Array broadcastable against (N, C, H, W)."""
        v = self.values
        if self.kind is MaskKind.CHANNEL:
            return v[:, :, None, None] if self.per_sample else v[None, :, None, None]
        return v[:, None, :, :] if self.per_sample else v[None, None, :, :]

    def equals(self, other):
        return self.kind == other.kind and np.array_equal(self.values, other.values)


def _round_half_up(value):
    return int(math.floor(value + 0.5))


def _draw_info(rng: RngStream):
    return SeedDraw(rng.name, rng.counter)


def sample_box(W, H, rng: RngStream) -> BoxCoords:
    if W < 1 or H < 1:
        raise ConfigurationError(f"box sampling needs W, H >= 1, got {W}x{H}")
    draw = _draw_info(rng)
    gen = rng.next_generator()
    lam = gen.uniform(0.0, 1.0)
    r_x = gen.uniform(0.0, W)
    r_y = gen.uniform(0.0, H)
    cut = math.sqrt(1.0 - lam)
    return BoxCoords(r_x=r_x, r_y=r_y, r_w=W * cut, r_h=H * cut, lam=lam, draw=draw)


def box_bounds(coords: BoxCoords, W, H):
    """Clipped half-open (y0, y1, x0, x1); edges are rounded half-up independently."""
    y0 = min(max(_round_half_up(coords.r_y - coords.r_h / 2), 0), H)
    y1 = min(max(_round_half_up(coords.r_y + coords.r_h / 2), 0), H)
    x0 = min(max(_round_half_up(coords.r_x - coords.r_w / 2), 0), W)
    x1 = min(max(_round_half_up(coords.r_x + coords.r_w / 2), 0), W)
    return y0, y1, x0, x1


def rasterize_box(coords: BoxCoords, W, H) -> BinaryMask:
    spatial = np.zeros((H, W), dtype=np.uint8)
    y0, y1, x0, x1 = box_bounds(coords, W, H)
    spatial[y0:y1, x0:x1] = 1
    return BinaryMask(MaskKind.BOX, spatial=spatial, coords=coords, seed_draw=coords.draw)


def complement(mask: BinaryMask) -> BinaryMask:
    if mask.kind is MaskKind.CHANNEL:
        return replace(mask, channel_bits=(1 - mask.channel_bits).astype(np.uint8))
    return replace(mask, spatial=(1 - mask.spatial).astype(np.uint8))


def sample_point_mask(W, H, rng: RngStream, keep_prob=None) -> BinaryMask:
    """Each cell kept independently; `keep_prob=None` draws it as 1 - lambda."""
    draw = _draw_info(rng)
    gen = rng.next_generator()
    if keep_prob is None:
        keep_prob = 1.0 - gen.uniform(0.0, 1.0)
    if not 0.0 <= keep_prob <= 1.0:
        raise ConfigurationError(f"keep_prob must be in [0, 1], got {keep_prob}")
    spatial = (gen.random((H, W)) < keep_prob).astype(np.uint8)
    return BinaryMask(MaskKind.POINT, spatial=spatial, seed_draw=draw)


def sample_channel_mask(C, rng: RngStream, lam=None) -> BinaryMask:
    """round(C * (1 - lambda)) channels chosen uniformly without replacement."""
    if C < 2:
        raise ConfigurationError(f"channel masks need at least 2 channels, got {C}")
    draw = _draw_info(rng)
    gen = rng.next_generator()
    if lam is None:
        lam = gen.uniform(0.0, 1.0)
    keep = _round_half_up(C * (1.0 - lam))
    bits = np.zeros(C, dtype=np.uint8)
    bits[gen.choice(C, size=keep, replace=False)] = 1
    return BinaryMask(MaskKind.CHANNEL, channel_bits=bits, seed_draw=draw)


def sample_mask(kind, W, H, rng: RngStream, channels=None) -> BinaryMask:
    kind = MaskKind(kind)
    if kind is MaskKind.BOX:
        return rasterize_box(sample_box(W, H, rng), W, H)
    if kind is MaskKind.POINT:
        return sample_point_mask(W, H, rng=rng)
    if channels is None:
        raise ConfigurationError("channel masks need the channel count")
    return sample_channel_mask(channels, rng)


def _stack(masks):
    first = masks[0]
    if first.kind is MaskKind.CHANNEL:
        return replace(first, channel_bits=np.stack([m.channel_bits for m in masks]), coords=None)
    return replace(first, spatial=np.stack([m.spatial for m in masks]), coords=None)


def sample_pair(W, H, variant, rng: RngStream, kind=MaskKind.BOX,
                channels=None, batch_size=None):
    """
    Two masks for one segmentation. Complementary pairs come from one draw;
    non-complementary pairs are two independent draws. With `batch_size` every
    sample gets its own draw (off by default: one mask per iteration).
    """
    variant = Pairing(variant)

    def draw():
        if batch_size is None:
            return sample_mask(kind, W, H, rng, channels)
        return _stack([sample_mask(kind, W, H, rng, channels) for _ in range(batch_size)])

    first = draw()
    if variant is Pairing.COMPLEMENTARY:
        return first, complement(first)
    return first, draw()
