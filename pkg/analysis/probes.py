"""
Inspection probes over a trained model snapshot.

- activation_counts: how many stage-output entries exceed a threshold, averaged over random samples
- compute_cam: class activation map from the last stage and the main FC weights
- fixed_mask_training_experiment: train with a constant mask on the last stage, then look at CAMs
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from core import ops
from core.augmentation import make_batch
from core.data_feed import Dataset
from core.errors import ConfigurationError, InputError
from core.mask import BinaryMask, MaskKind
from core.models import ConvNet, ModelSpec, build
from core.rng import RngStream, SeedBundle
from core.schedule import Schedule
from core.strategy_base import FMForwardResult, StrategyBase, combine_losses
from core.tensor import Tensor, no_grad
from training.run_training import train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ActivationStats:
    layer_id: str
    threshold: float
    count_per_sample: float
    sample_count: int


@dataclass(frozen=True, eq=False)
class CamMap:
    class_id: int
    heat: np.ndarray
    normalized: bool = True


def count_above(values: np.ndarray, threshold=0.5) -> np.ndarray:
    """Per-sample number of entries strictly greater than `threshold`."""
    values = np.asarray(values)
    return (values.reshape(values.shape[0], -1) > threshold).sum(axis=1)


def activation_counts(model: ConvNet, dataset: Dataset, layer_ids: Sequence[str], threshold=0.5,
                      sample_count=64, *, rng: RngStream, stats=None) -> List[ActivationStats]:
    unknown = [l for l in layer_ids if l not in model.stage_ids]
    if unknown:
        raise ConfigurationError(f"unknown layer ids {unknown}; model stages are {list(model.stage_ids)}")
    if not 1 <= sample_count <= len(dataset):
        raise ConfigurationError(f"sample_count {sample_count} must be in [1, {len(dataset)}]")
    idx = np.sort(rng.next_generator().choice(len(dataset), size=sample_count, replace=False))
    batch = make_batch(dataset, idx, stats)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            stages = {s.stage_id: s for s in model.forward_stages(batch.images)}
    finally:
        if was_training:
            model.train()
    out = []
    for layer_id in layer_ids:
        counts = count_above(stages[layer_id].tensor.data, threshold)
        out.append(ActivationStats(layer_id, threshold, float(counts.mean()), sample_count))
        logger.info("[Probe] %s: %.1f activations > %g per sample", layer_id, out[-1].count_per_sample, threshold)
    return out


def cam_from_features(features: np.ndarray, fc_weight: np.ndarray, class_id: int) -> CamMap:
    """
    heat = sum_k w[class_id, k] * F_k, negatives clipped, then min-max scaled
    to [0, 1]. A flat map comes back as zeros.
    """
    if not 0 <= class_id < fc_weight.shape[0]:
        raise InputError(f"class_id {class_id} out of range [0, {fc_weight.shape[0]})")
    heat = np.tensordot(fc_weight[class_id].astype(np.float64), features.astype(np.float64), axes=(0, 0))
    heat = np.maximum(heat, 0.0)
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 0:
        return CamMap(class_id, np.zeros_like(heat))
    return CamMap(class_id, (heat - lo) / (hi - lo))


def compute_cam(model: ConvNet, image, class_id: int, mask: BinaryMask = None) -> CamMap:
    """CAM of one (C, H, W) normalized image; `mask` is applied to the last stage first."""
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if not 0 <= class_id < model.spec.num_classes:
        raise InputError(f"class_id {class_id} out of range [0, {model.spec.num_classes})")
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            feature = model.forward_stages(Tensor(x))[-1].tensor
            if mask is not None:
                feature = ops.elementwise_mul(feature, mask.as_factor())
    finally:
        if was_training:
            model.train()
    return cam_from_features(feature.data[0], model.fc_weight.data, class_id)


def region_mask(W, H, region="left") -> BinaryMask:
    """Constant spatial mask keeping a half-plane or a quadrant of the last-stage map."""
    spatial = np.zeros((H, W), dtype=np.uint8)
    hh, hw = H // 2, W // 2
    regions = {
        "all": (slice(None), slice(None)),
        "left": (slice(None), slice(0, hw)),
        "right": (slice(None), slice(hw, None)),
        "top": (slice(0, hh), slice(None)),
        "bottom": (slice(hh, None), slice(None)),
        "top_left": (slice(0, hh), slice(0, hw)),
        "top_right": (slice(0, hh), slice(hw, None)),
        "bottom_left": (slice(hh, None), slice(0, hw)),
        "bottom_right": (slice(hh, None), slice(hw, None)),
    }
    if region not in regions:
        raise ConfigurationError(f"unknown mask region {region!r}; choose from {sorted(regions)}")
    spatial[regions[region]] = 1
    return BinaryMask(MaskKind.BOX, spatial=spatial)


class FixedMaskStrategy(StrategyBase):
    """Main path only, with one constant mask multiplied into the last stage output."""

    name = "fixed_mask"

    def __init__(self, mask: BinaryMask, stage_id="stage3"):
        super().__init__()
        self.mask = mask
        self.stage_id = stage_id
        self._factor = mask.as_factor()

    def _hook(self, stage_id, x):
        return ops.elementwise_mul(x, self._factor) if stage_id == self.stage_id else x

    def train_forward(self, model, batch, rng=None) -> FMForwardResult:
        _, main_logits = model.forward_with_stages(batch.images, stage_hook=self._hook)
        tensors, losses, total = combine_losses([main_logits], batch.labels, batch.mixup_state)
        return FMForwardResult(main_logits, (), (self.mask,), losses, total, tuple(tensors))


@dataclass
class FixedMaskExperiment:
    model: ConvNet
    records: list
    cams: List[CamMap]
    sample_indices: np.ndarray


def fixed_mask_training_experiment(spec: ModelSpec, quadrant_mask: BinaryMask, schedule: Schedule,
                                   dataset: Dataset, seeds: SeedBundle, test_dataset: Dataset = None,
                                   cam_samples=4, **train_kwargs) -> FixedMaskExperiment:
    """Train with the constant mask, then one CAM per sample for its predicted class."""
    model = build(spec, seeds.stream("init"))
    strategy = FixedMaskStrategy(quadrant_mask, model.stage_ids[-1])
    model, records = train(model, None, dataset, schedule, seeds, test_dataset=test_dataset,
                           strategy=strategy, **train_kwargs)
    source = test_dataset if test_dataset is not None else dataset
    idx = np.arange(min(cam_samples, len(source)))
    batch = make_batch(source, idx)
    model.eval()
    with no_grad():
        preds = model(batch.images).data.argmax(axis=1)
    cams = [compute_cam(model, batch.images.data[i], int(preds[i]), mask=quadrant_mask) for i in range(len(idx))]
    return FixedMaskExperiment(model, records, cams, idx)
