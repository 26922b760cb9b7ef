"""
Feature Mining.

At every configured stage output X a fresh mask pair (M, M2) is drawn, the
feature is segmented into X * M and X * M2 (M2 = 1 - M for complementary
pairs), and each part goes through its own GAP + FC head. The cross-entropies
of all heads and of the main classifier are summed without weights. The main
classifier always sees the unmasked X, and evaluation uses the main path only.
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from core import ops
from core.errors import ConfigurationError, UsageError
from core.mask import BinaryMask, MaskKind, Pairing, sample_pair
from core.models import STAGE_IDS, ParameterSet
from core.rng import RngStream
from core.strategy_base import BaselineStrategy, FMForwardResult, StrategyBase, combine_losses
from core.tensor import Parameter, Tensor, no_grad


@dataclass(frozen=True)
class FMConfig:
    sites: Tuple[str, ...] = ("stage3",)
    mask_variant: str = "box"
    pairing: str = "complementary"
    enabled: bool = True
    per_sample_masks: bool = False

    def validate(self, stage_ids=STAGE_IDS):
        if len(set(self.sites)) != len(self.sites):
            raise ConfigurationError(f"fm.sites must attach to distinct stages, got {list(self.sites)}")
        unknown = [s for s in self.sites if s not in stage_ids]
        if unknown:
            raise ConfigurationError(f"fm.sites has unknown stages {unknown}; model stages are {list(stage_ids)}")
        try:
            MaskKind(self.mask_variant)
            Pairing(self.pairing)
        except ValueError as e:
            raise ConfigurationError(f"fm: {e}") from e
        return self

    @property
    def active_sites(self):
        return tuple(self.sites) if self.enabled else ()

    @property
    def num_classifiers(self):
        return 1 + 2 * len(self.active_sites)


@dataclass
class FMHead:
    weight: Parameter
    bias: Parameter


@dataclass
class FMSite:
    stage_id: str
    channels: int
    head_1: FMHead
    head_2: FMHead
    mask_variant: MaskKind = MaskKind.BOX
    pairing: Pairing = Pairing.COMPLEMENTARY


def segment(X: Tensor, mask_pair: Tuple[BinaryMask, BinaryMask]) -> Tuple[Tensor, Tensor]:
    """X1 = X * M, X2 = X * M2; X itself is left untouched."""
    m1, m2 = mask_pair
    return ops.elementwise_mul(X, m1.as_factor()), ops.elementwise_mul(X, m2.as_factor())


def head_forward(part: Tensor, head: FMHead) -> Tensor:
    if part.ndim != 4 or part.shape[1] != head.weight.shape[1]:
        raise ConfigurationError(f"head expects {head.weight.shape[1]} channels, got feature {part.shape}")
    return ops.fully_connected(ops.global_avg_pool(part), head.weight, head.bias)


def fm_loss(main_logits: Tensor, aux: List[Tensor], labels, mixup_state=None, masks_used=()) -> FMForwardResult:
    """Sum of cross-entropies over the main head and every auxiliary head."""
    for logits in aux:
        if logits.shape != main_logits.shape:
            raise ConfigurationError(f"aux logits {logits.shape} do not match main logits {main_logits.shape}")
    tensors, losses, total = combine_losses([main_logits, *aux], labels, mixup_state)
    pairs = tuple(zip(aux[0::2], aux[1::2]))
    return FMForwardResult(main_logits, pairs, tuple(masks_used), losses, total, tuple(tensors))


class FeatureMining(StrategyBase, ParameterSet):
    """Training strategy owning the auxiliary heads of every FM site."""

    name = "feature_mining"

    def __init__(self, model, config: FMConfig, init_rng: RngStream):
        StrategyBase.__init__(self)
        ParameterSet.__init__(self)
        self.config = config.validate(model.stage_ids)
        self.num_classes = model.spec.num_classes
        self.sites = []
        for stage_id in config.active_sites:
            channels = model.stage_channels[stage_id]
            heads = []
            for h in (1, 2):
                w, b = self.fc_params(f"fm.{stage_id}.head{h}", self.num_classes, channels, init_rng, zero_bias=True)
                heads.append(FMHead(w, b))
            self.sites.append(FMSite(stage_id, channels, heads[0], heads[1],
                                     MaskKind(config.mask_variant), Pairing(config.pairing)))
        self.log("feature mining on %s (%s, %s): %d classifiers, %d head parameters",
                 list(config.active_sites) or "no stages", config.mask_variant, config.pairing,
                 self.num_classifiers, self.num_parameters())

    @property
    def num_classifiers(self):
        return 1 + 2 * len(self.sites)

    def parameters(self):
        return ParameterSet.parameters(self)

    def head_names(self):
        names = ["main"]
        for site in self.sites:
            names += [f"{site.stage_id}.part1", f"{site.stage_id}.part2"]
        return names

    def _draw_pair(self, site: FMSite, stage, rng: RngStream, batch_size):
        h, w = stage.spatial
        return sample_pair(w, h, site.pairing, rng, kind=site.mask_variant, channels=stage.channels,
                           batch_size=batch_size if self.config.per_sample_masks else None)

    def train_forward(self, model, batch, rng: RngStream = None) -> FMForwardResult:
        if not model.training:
            raise UsageError("train_forward needs the model in train mode")
        if self.sites and rng is None:
            raise UsageError("feature mining needs a mask stream")
        stages, main_logits = model.forward_with_stages(batch.images)
        by_id = {s.stage_id: s for s in stages}
        aux, masks = [], []
        for site in self.sites:
            stage = by_id.get(site.stage_id)
            if stage is None or stage.channels != site.channels:
                raise ConfigurationError(f"FM site {site.stage_id} does not match the model's stage outputs")
            pair = self._draw_pair(site, stage, rng, batch.images.shape[0])
            x1, x2 = segment(stage.tensor, pair)
            aux += [head_forward(x1, site.head_1), head_forward(x2, site.head_2)]
            masks.append(pair)
        return fm_loss(main_logits, aux, batch.labels, batch.mixup_state, masks)

    def head_accuracy(self, model, images, labels, rng: RngStream):
        """Top-1 of every head with one complementary box pair per site (diagnostic)."""
        labels = np.asarray(labels)
        with no_grad():
            stages, main_logits = model.forward_with_stages(images)
            by_id = {s.stage_id: s for s in stages}
            accs = {"main": float(np.mean(main_logits.data.argmax(1) == labels))}
            for site in self.sites:
                stage = by_id[site.stage_id]
                h, w = stage.spatial
                pair = sample_pair(w, h, Pairing.COMPLEMENTARY, rng, kind=MaskKind.BOX)
                x1, x2 = segment(stage.tensor, pair)
                for part, head, tag in ((x1, site.head_1, "part1"), (x2, site.head_2, "part2")):
                    pred = head_forward(part, head).data.argmax(1)
                    accs[f"{site.stage_id}.{tag}"] = float(np.mean(pred == labels))
        return accs


def train_forward(model, batch, strategy: StrategyBase, rng: RngStream = None) -> FMForwardResult:
    return strategy.train_forward(model, batch, rng)


def build_strategy(model, config: FMConfig, init_rng: RngStream) -> StrategyBase:
    if not config.enabled:
        return BaselineStrategy()
    return FeatureMining(model, config, init_rng)
