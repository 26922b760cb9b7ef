# core/augmentation.py
import numpy as np

from core.data_feed import CIFAR_STATS, Dataset, LabeledBatch
from core.errors import ConfigurationError
from core.rng import RngStream
from core.tensor import Tensor


class Augmentations:
    """Standard CIFAR training transforms on float images of shape (N, C, H, W)."""

    @staticmethod
    def to_float(images: np.ndarray):
        """uint8 pixels to float32 in [0, 1]."""
        return images.astype(np.float32) / np.float32(255.0)

    @staticmethod
    def pad_crop(images: np.ndarray, offsets: np.ndarray, pad=4):
        """Zero-pad by `pad` and crop back at per-sample (dy, dx) offsets."""
        n, _, h, w = images.shape
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.empty_like(images)
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
        return out

    @staticmethod
    def hflip(images: np.ndarray, flips: np.ndarray):
        out = images.copy()
        out[flips] = out[flips][..., ::-1]
        return out

    @staticmethod
    def normalize(images: np.ndarray, mean, std):
        mean = np.asarray(mean, dtype=images.dtype)[None, :, None, None]
        std = np.asarray(std, dtype=images.dtype)[None, :, None, None]
        return (images - mean) / std


def augment(images: np.ndarray, rng: RngStream, pad=4, flip_prob=0.5, offsets=None, flips=None):
    """
    Random crop from the zero-padded image plus horizontal flip. `offsets` and
    `flips` override the random draws.
    """
    n = images.shape[0]
    if offsets is None or flips is None:
        gen = rng.next_generator()
        drawn_offsets = gen.integers(0, 2 * pad + 1, size=(n, 2))
        drawn_flips = gen.random(n) < flip_prob
        offsets = drawn_offsets if offsets is None else offsets
        flips = drawn_flips if flips is None else flips
    out = Augmentations.pad_crop(images, np.asarray(offsets), pad)
    return Augmentations.hflip(out, np.asarray(flips, dtype=bool))


def mixup(batch: LabeledBatch, alpha, rng: RngStream, coeff=None) -> LabeledBatch:
    """Convex combination with a shuffled copy of the batch, m ~ Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ConfigurationError(f"mixup alpha must be positive, got {alpha}")
    gen = rng.next_generator()
    m = float(gen.beta(alpha, alpha)) if coeff is None else float(coeff)
    perm = gen.permutation(batch.images.shape[0])
    x = batch.images.data
    mixed = x * x.dtype.type(m) + x[perm] * x.dtype.type(1.0 - m)
    return LabeledBatch(Tensor(mixed), batch.labels, (batch.labels[perm], m), batch.indices)


def make_batch(dataset: Dataset, indices, stats=None, augment_rng: RngStream = None, mixup_alpha=0.0,
               mixup_rng: RngStream = None) -> LabeledBatch:
    """Gather, optionally augment, normalize and wrap one batch."""
    mean, std = stats or CIFAR_STATS[dataset.num_classes]
    images = Augmentations.to_float(dataset.images[indices])
    if augment_rng is not None:
        images = augment(images, augment_rng)
    images = Augmentations.normalize(images, mean, std)
    batch = LabeledBatch(Tensor(images), dataset.labels[indices].copy(), None, np.asarray(indices))
    if mixup_alpha > 0:
        batch = mixup(batch, mixup_alpha, mixup_rng)
    return batch
