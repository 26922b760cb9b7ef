"""
Training loop, evaluation and overhead instrumentation.

One iteration: build (augmented, optionally mixed) batch -> strategy forward
-> summed loss backward -> momentum SGD step. The LR follows the step
schedule per epoch. Every epoch ends with an evaluation of the main path
on the test split; the best epoch by validation accuracy is kept.
"""
import logging
import math
import time
import tracemalloc
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
from tqdm import tqdm

from core.augmentation import make_batch
from core.data_feed import CIFAR_STATS, Dataset, LabeledBatch, batch_indices, prefetch
from core.errors import NumericError, TrainingDivergedError
from core.feature_mining import FMConfig, build_strategy
from core.models import ConvNet, ModelSpec, build
from core.optim import SGD
from core.rng import SeedBundle
from core.schedule import Schedule
from core.strategy_base import StrategyBase, eval_forward
from core.tensor import Tensor
from training.results.metrics import RunRecord, best_record
from utils.checkpoint import CheckpointState, snapshot

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k=1):
    """Fraction of rows whose label is among the k largest logits."""
    k = min(k, logits.shape[1])
    if k == 1:
        return float(np.mean(logits.argmax(axis=1) == labels))
    top = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    return float(np.mean((top == labels[:, None]).any(axis=1)))


def _eval_batches(dataset: Dataset, batch_size, stats):
    for idx in batch_indices(len(dataset), batch_size):
        yield make_batch(dataset, idx, stats)


def evaluate_topk(model: ConvNet, dataset: Dataset, batch_size=500, stats=None, ks=(1, 5)):
    """Top-k accuracies of the main classifier; the model is returned in its previous mode."""
    was_training = model.training
    model.eval()
    hits = {k: 0.0 for k in ks}
    try:
        for batch in _eval_batches(dataset, batch_size, stats):
            logits = eval_forward(model, batch).data
            for k in ks:
                hits[k] += topk_accuracy(logits, batch.labels, k) * len(batch.labels)
    finally:
        if was_training:
            model.train()
    return {k: hits[k] / len(dataset) for k in ks}


def evaluate(model: ConvNet, dataset: Dataset, batch_size=500, stats=None) -> float:
    """Top-1 accuracy of argmax(main logits)."""
    return evaluate_topk(model, dataset, batch_size, stats, ks=(1,))[1]


def evaluate_heads(model: ConvNet, strategy: StrategyBase, dataset: Dataset, rng, batch_size=500, stats=None):
    """Accuracy of every classifier, auxiliary heads on box-masked features."""
    if not hasattr(strategy, "head_accuracy"):
        return {"main": evaluate(model, dataset, batch_size, stats)}
    was_training = model.training
    model.eval()
    totals = {}
    try:
        for batch in _eval_batches(dataset, batch_size, stats):
            for name, acc in strategy.head_accuracy(model, batch.images, batch.labels, rng).items():
                totals[name] = totals.get(name, 0.0) + acc * len(batch.labels)
    finally:
        if was_training:
            model.train()
    return {name: total / len(dataset) for name, total in totals.items()}


class Trainer:
    """Owns one model, its strategy and optimizer for a full schedule."""

    def __init__(self, model: ConvNet, fm_config: FMConfig, dataset: Dataset, schedule: Schedule,
                 seeds: SeedBundle, test_dataset: Optional[Dataset] = None, strategy: StrategyBase = None,
                 optimizer: OptimizerConfig = OptimizerConfig(), augment=True, mixup_alpha=0.0, stats=None,
                 prefetch_depth=2, eval_batch_size=500, progress=False, track_memory=False,
                 record_sink: Callable[[RunRecord], None] = None, keep_heads=False):
        self.model = model
        self.dataset = dataset
        self.test_dataset = test_dataset
        self.schedule = schedule.validate()
        self.seeds = seeds
        self.strategy = strategy or build_strategy(model, fm_config, seeds.stream("init"))
        self.optimizer = SGD(model.parameters() + self.strategy.parameters(), lr=schedule.base_lr,
                             momentum=optimizer.momentum, weight_decay=optimizer.weight_decay)
        self.augment = augment
        self.mixup_alpha = mixup_alpha
        self.stats = stats or CIFAR_STATS[dataset.num_classes]
        self.prefetch_depth = prefetch_depth
        self.eval_batch_size = eval_batch_size
        self.progress = progress
        self.track_memory = track_memory
        self.record_sink = record_sink
        self.keep_heads = keep_heads
        self.iteration = 0
        self.records: List[RunRecord] = []
        self.best_state: Optional[CheckpointState] = None

    def _batches(self):
        shuffle = self.seeds.stream("shuffle")
        augment_rng = self.seeds.stream("augment") if self.augment else None
        mixup_rng = self.seeds.stream("mixup")
        for idx in batch_indices(len(self.dataset), self.schedule.batch_size, shuffle):
            yield make_batch(self.dataset, idx, self.stats, augment_rng, self.mixup_alpha, mixup_rng)

    def _step(self, batch: LabeledBatch, lr):
        try:
            result = self.strategy.train_forward(self.model, batch, self.seeds.stream("mask"))
        except NumericError as e:
            raise TrainingDivergedError(self.iteration, -1, lr, str(e)) from e
        for head, loss in enumerate(result.per_head_losses):
            if not math.isfinite(loss):
                raise TrainingDivergedError(self.iteration, head, lr)
        try:
            result.total_loss.backward()
        except NumericError as e:
            raise TrainingDivergedError(self.iteration, -1, lr, str(e)) from e
        self.optimizer.lr = lr
        self.optimizer.step()
        return result

    def _finished(self):
        cap = self.schedule.max_iterations
        return cap and self.iteration >= cap

    def run_epoch(self, epoch) -> RunRecord:
        lr = self.schedule.lr_at(epoch)
        self.model.train()
        loss_sums = np.zeros(self.strategy.num_classifiers, dtype=np.float64)
        correct = seen = iters = 0
        elapsed = 0.0
        if self.track_memory:
            tracemalloc.start()
            tracemalloc.reset_peak()
        batches = prefetch(self._batches(), self.prefetch_depth)
        bar = tqdm(batches, desc=f"epoch {epoch + 1}/{self.schedule.epochs}", leave=False, disable=not self.progress)
        try:
            for batch in bar:
                t0 = time.perf_counter()
                result = self._step(batch, lr)
                elapsed += time.perf_counter() - t0
                self.iteration += 1
                iters += 1
                loss_sums += result.per_head_losses
                correct += int(np.sum(result.main_logits.data.argmax(axis=1) == batch.labels))
                seen += len(batch.labels)
                bar.set_postfix(loss=f"{sum(result.per_head_losses):.3f}")
                if self._finished():
                    break
        finally:
            bar.close()
            batches.close()
            peak = 0
            if self.track_memory:
                peak = tracemalloc.get_traced_memory()[1]
                tracemalloc.stop()
        val = {1: float("nan"), 5: float("nan")}
        if self.test_dataset is not None:
            val = evaluate_topk(self.model, self.test_dataset, self.eval_batch_size, self.stats)
        losses = tuple(float(x) for x in loss_sums / max(iters, 1))
        record = RunRecord(epoch=epoch + 1, lr=lr, per_head_train_loss=losses, train_acc=correct / max(seen, 1),
                           val_acc=val[1], val_top5=val[5], sec_per_iter=elapsed / max(iters, 1),
                           peak_mem_bytes=int(peak), iterations=iters, head_names=tuple(self.strategy.head_names()))
        logger.info("epoch %d lr %.4g losses [%s] train %.4f val %.4f top5 %.4f %.4fs/iter",
                    record.epoch, lr, ", ".join(f"{l:.4f}" for l in losses), record.train_acc,
                    record.val_acc, record.val_top5, record.sec_per_iter)
        return record

    def run(self):
        best_acc = -1.0
        for epoch in range(self.schedule.epochs):
            record = self.run_epoch(epoch)
            self.records.append(record)
            if self.record_sink is not None:
                self.record_sink(record)
            score = record.val_acc if not math.isnan(record.val_acc) else -math.inf
            if self.best_state is None or score > best_acc or self.test_dataset is None:
                best_acc = score
                self.best_state = snapshot(self.model, self.strategy, self.keep_heads,
                                           meta={"epoch": record.epoch, "val_acc": _finite_or_none(record.val_acc)})
            if self._finished():
                break
        best = best_record(self.records)
        logger.info("best epoch %d: val %.4f", best.epoch, best.val_acc)
        return self.model, self.records


def _finite_or_none(x):
    return float(x) if math.isfinite(x) else None


def train(model, fm_config: FMConfig, dataset: Dataset, schedule: Schedule, seeds: SeedBundle, **kwargs):
    """Run the full schedule; returns (model, RunRecord list)."""
    return Trainer(model, fm_config, dataset, schedule, seeds, **kwargs).run()


def _synthetic_batch(spec: ModelSpec, batch_size, rng) -> LabeledBatch:
    gen = rng.next_generator()
    images = gen.standard_normal((batch_size, spec.in_channels, spec.image_size, spec.image_size)).astype(np.float32)
    labels = gen.integers(0, spec.num_classes, size=batch_size)
    return LabeledBatch(Tensor(images), labels)


def measure_overhead(model: ConvNet, strategy: StrategyBase, batch_size, iters, seeds: SeedBundle, warmup=10,
                     memory_iters=2):
    """
    Mean wall time per training iteration after `warmup` untimed iterations,
    then the peak traced allocation over `memory_iters` further iterations.
    """
    model.train()
    batch = _synthetic_batch(model.spec, batch_size, seeds.stream("probe"))
    optimizer = SGD(model.parameters() + strategy.parameters(), lr=0.01)
    mask_rng = seeds.stream("mask")

    def step():
        strategy.train_forward(model, batch, mask_rng).total_loss.backward()
        optimizer.step()

    for _ in range(warmup):
        step()
    t0 = time.perf_counter()
    for _ in range(iters):
        step()
    sec_per_iter = (time.perf_counter() - t0) / max(iters, 1)
    tracemalloc.start()
    tracemalloc.reset_peak()
    try:
        for _ in range(memory_iters):
            step()
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return sec_per_iter, int(peak)


OVERHEAD_VARIANTS = (("baseline", ()), ("fm_1_site", ("stage3",)), ("fm_2_sites", ("stage2", "stage3")))


def overhead_table(spec: ModelSpec, batch_size, iters, seeds: SeedBundle, warmup=10, fm_config=FMConfig()):
    """Baseline vs FM on one and two sites, same initial weights; one row per variant."""
    rows = []
    for variant, sites in OVERHEAD_VARIANTS:
        variant_seeds = SeedBundle(seeds.as_dict())
        model = build(spec, variant_seeds.stream("init"))
        cfg = FMConfig(sites=sites, mask_variant=fm_config.mask_variant, pairing=fm_config.pairing,
                       enabled=bool(sites))
        strategy = build_strategy(model, cfg, variant_seeds.stream("init"))
        sec, peak = measure_overhead(model, strategy, batch_size, iters, variant_seeds, warmup)
        logger.info("[Overhead] %s: %.4f s/iter, peak %.1f MB", variant, sec, peak / 2**20)
        rows.append({"variant": variant, "sites": len(sites), "batch_size": batch_size, "iters": iters,
                     "sec_per_iter": sec, "peak_mem_bytes": peak})
    return rows
