import logging
from dataclasses import dataclass, field
from typing import List, Tuple

from core import ops
from core.errors import UsageError
from core.tensor import Tensor, no_grad


@dataclass(frozen=True)
class FMForwardResult:
    """Everything one training forward produced; immutable once built."""

    main_logits: Tensor
    aux_logits: Tuple[Tuple[Tensor, Tensor], ...]
    masks_used: tuple
    per_head_losses: Tuple[float, ...]
    total_loss: Tensor
    head_loss_tensors: Tuple[Tensor, ...] = field(default=(), repr=False)

    @property
    def num_heads(self):
        return len(self.per_head_losses)


def head_loss(logits: Tensor, labels, mixup_state=None) -> Tensor:
    """Cross-entropy against `labels`, or the mixup convex combination."""
    if mixup_state is None:
        return ops.softmax_cross_entropy(logits, labels)
    permuted, coeff = mixup_state
    return (ops.softmax_cross_entropy(logits, labels) * coeff
            + ops.softmax_cross_entropy(logits, permuted) * (1.0 - coeff))


def combine_losses(logits: List[Tensor], labels, mixup_state=None):
    """Unweighted sum of per-head losses, main head first."""
    tensors = [head_loss(l, labels, mixup_state) for l in logits]
    total = sum(tensors)
    return tensors, tuple(t.item() for t in tensors), total


class StrategyBase:
    """
    Base training strategy: turns a batch into per-head losses and handles
    logging, so child strategies stay clean. The baseline is plain
    cross-entropy on the main classifier.
    """

    name = "baseline"

    def __init__(self):
        self.logger = logging.getLogger(f"{__name__}.{self.name}")

    def log(self, txt, *args):
        self.logger.info(txt, *args)

    def parameters(self):
        """Trainable parameters beyond the model's own."""
        return []

    @property
    def num_classifiers(self):
        return 1

    def head_names(self):
        return ["main"]

    def train_forward(self, model, batch, rng=None) -> FMForwardResult:
        if not model.training:
            raise UsageError("train_forward needs the model in train mode")
        _, main_logits = model.forward_with_stages(batch.images)
        tensors, losses, total = combine_losses([main_logits], batch.labels, batch.mixup_state)
        return FMForwardResult(main_logits, (), (), losses, total, tuple(tensors))

    def eval_forward(self, model, batch) -> Tensor:
        return eval_forward(model, batch)


class BaselineStrategy(StrategyBase):
    pass


def eval_forward(model, batch) -> Tensor:
    """Main path only: no masks, no auxiliary heads, no graph."""
    if model.training:
        raise UsageError("eval_forward needs the model in eval mode")
    images = batch.images if hasattr(batch, "images") else batch
    with no_grad():
        return model(images)
