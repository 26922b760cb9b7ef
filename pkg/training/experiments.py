"""
Workflows behind the command-line subcommands. Each takes a validated
RunConfig, writes its artifacts under `output_dir` and returns a small
results dict.
"""
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from analysis.probes import activation_counts, compute_cam, fixed_mask_training_experiment, region_mask
from core.augmentation import make_batch
from core.data_feed import (corrupt_labels, load_cifar, resolve_files, subset_per_class, write_cifar_dir,
                            write_provenance)
from core.errors import ConfigurationError
from core.feature_mining import build_strategy
from core.models import build
from core.mask import sample_pair
from core.ops import conv_output_size
from core.strategy_base import eval_forward
from core.tensor import no_grad
from training.results.metrics import (SUMMARY_SCHEMA, best_record, overhead_ratios, summarize_runs, summary_frame,
                                      write_csv, write_records)
from training.run_training import Trainer, evaluate_heads, evaluate_topk, overhead_table
from utils.checkpoint import apply_state, load_checkpoint, save_checkpoint, snapshot
from utils.config_loader import RunConfig, deep_merge, parse_config
from utils.images import mask_image, write_cam
from utils.metrics_writer import MetricsWriter

logger = logging.getLogger(__name__)

CIFAR_IMAGE_SIZE = 32


def preflight(cfg: RunConfig, splits=("train", "test")):
    """Checks that need no output directory; raises ConfigurationError."""
    if cfg.model.image_size != CIFAR_IMAGE_SIZE or cfg.model.in_channels != 3:
        raise ConfigurationError("CIFAR runs need model.image_size 32 and model.in_channels 3")
    for split in splits:
        resolve_files(cfg.data.root, cfg.data.version, split)


def load_datasets(cfg: RunConfig, seeds, with_test=True):
    """Training split with subset and label noise applied (in that order) plus the clean test split."""
    train_ds = load_cifar(cfg.data.root, cfg.data.version, "train")
    if cfg.data.subset_per_class:
        train_ds = subset_per_class(train_ds, cfg.data.subset_per_class, seeds.stream("subset"))
    noise = cfg.data.noise_spec()
    if noise is not None:
        train_ds = corrupt_labels(train_ds, noise, seeds.stream(noise.stream))
    test_ds = None
    if with_test:
        test_ds = load_cifar(cfg.data.root, cfg.data.version, "test")
        if cfg.data.test_limit:
            test_ds = test_ds.take(np.arange(min(cfg.data.test_limit, len(test_ds))))
    return train_ds, test_ds


def _checkpoint_meta(cfg: RunConfig, **extra):
    return {"model": cfg.to_dict()["model"], "fm_sites": list(cfg.fm.active_sites), **extra}


def run_single(cfg: RunConfig, run_seed, out_dir: Path):
    """One training run for one seed; returns its per-seed summary row."""
    seeds = cfg.seeds.bundle(run_seed)
    train_ds, test_ds = load_datasets(cfg, seeds)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_provenance(train_ds, out_dir / "data_provenance.yaml", seeds.as_dict())
    model = build(cfg.model, seeds.stream("init"), seeds.stream("regularizer"))
    with MetricsWriter(out_dir / "metrics.csv", out_dir / "timing.csv") as writer:
        trainer = Trainer(model, cfg.fm, train_ds, cfg.schedule, seeds, test_dataset=test_ds,
                          optimizer=cfg.optimizer, augment=cfg.data.augment, mixup_alpha=cfg.data.mixup_alpha,
                          prefetch_depth=cfg.data.prefetch, eval_batch_size=cfg.data.eval_batch_size,
                          progress=cfg.logging.progress, record_sink=writer, keep_heads=cfg.eval.heads)
        trainer.run()
    best, final = best_record(trainer.records), trainer.records[-1]
    trainer.best_state.meta.update(_checkpoint_meta(cfg, seed=run_seed))
    save_checkpoint(trainer.best_state, out_dir / "best.ckpt")
    save_checkpoint(snapshot(model, trainer.strategy, cfg.eval.heads,
                             _checkpoint_meta(cfg, seed=run_seed, epoch=final.epoch)), out_dir / "final.ckpt")
    return {"seed": run_seed, "best_epoch": best.epoch, "best_val_acc": best.val_acc,
            "best_val_top5": best.val_top5, "final_val_acc": final.val_acc}


def run_experiment(cfg: RunConfig):
    """cmd_train: every seed in `seeds.runs`, then a mean ± std summary."""
    preflight(cfg)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml(), encoding="utf8")
    runs = list(cfg.seeds.runs)
    per_seed = []
    for seed in runs:
        seed_dir = run_dir if len(runs) == 1 else run_dir / f"seed_{seed}"
        logger.info("[Train] seed %d -> %s", seed, seed_dir)
        per_seed.append(run_single(cfg, seed, seed_dir))
    write_csv(summary_frame(per_seed), run_dir / "summary.csv", SUMMARY_SCHEMA)
    results = summarize_runs(per_seed)
    logger.info("[Train] best val acc %.4f ± %.4f over %d run(s)", results["best_val_acc_mean"],
                results["best_val_acc_std"], results["runs"])
    return dict(results, per_seed=per_seed)


def variant_config(cfg: RunConfig, variant: dict, output_dir) -> RunConfig:
    """Base config with a variant's section overrides applied."""
    overrides = {k: v for k, v in variant.items() if k != "name"}
    raw = deep_merge(cfg.to_dict(), overrides)
    raw["output_dir"] = str(output_dir)
    return parse_config(raw)


def ablation_variants(cfg: RunConfig):
    variants = [dict(v) for v in cfg.ablate.variants]
    for v in variants:
        if "name" not in v:
            raise ConfigurationError(f"ablate.variants entry without a name: {v}")
    names = [v["name"] for v in variants]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"ablate.variants names must be unique, got {names}")
    if cfg.ablate.include_baseline:
        variants.insert(0, {"name": "baseline", "fm": {"enabled": False}})
    return variants


def run_ablation(cfg: RunConfig):
    """cmd_ablate: every variant with the same seeds; one comparison row each."""
    run_dir = Path(cfg.output_dir)
    variants = ablation_variants(cfg)
    configs = [(v["name"], variant_config(cfg, v, run_dir / v["name"])) for v in variants]
    preflight(cfg)
    rows = []
    for name, vcfg in configs:
        logger.info("[Ablate] variant %s", name)
        results = run_experiment(vcfg)
        rows.append({"variant": name, "sites": "+".join(vcfg.fm.active_sites) or "-",
                     "mask_variant": vcfg.fm.mask_variant if vcfg.fm.active_sites else "-",
                     "pairing": vcfg.fm.pairing if vcfg.fm.active_sites else "-",
                     "regularizer": vcfg.model.regularizer, "runs": results["runs"],
                     "best_val_acc_mean": results["best_val_acc_mean"],
                     "best_val_acc_std": results["best_val_acc_std"]})
    df = pd.DataFrame(rows)
    write_csv(df, run_dir / "ablation.csv", "fm-ablation/1")
    return {"variants": len(rows), "rows": rows}


def _restore_model(cfg: RunConfig, checkpoint, with_heads=False):
    seeds = cfg.seeds.bundle()
    model = build(cfg.model, seeds.stream("init"))
    strategy = build_strategy(model, cfg.fm, seeds.stream("init")) if with_heads else None
    state = load_checkpoint(checkpoint)
    apply_state(state, model, strategy)
    if with_heads and not state.has_heads:
        raise ConfigurationError(f"{checkpoint} carries no FM heads; train with eval.heads: true")
    return model.eval(), strategy


def run_eval(cfg: RunConfig):
    """cmd_eval: top-1/top-5 of a checkpoint on the test split (per-head accuracy on request)."""
    preflight(cfg, splits=("test",))
    checkpoint = Path(cfg.eval.checkpoint or Path(cfg.output_dir) / "best.ckpt")
    model, strategy = _restore_model(cfg, checkpoint, with_heads=cfg.eval.heads)
    test_ds = load_cifar(cfg.data.root, cfg.data.version, "test")
    if cfg.data.test_limit:
        test_ds = test_ds.take(np.arange(min(cfg.data.test_limit, len(test_ds))))
    acc = evaluate_topk(model, test_ds, cfg.data.eval_batch_size)
    row = {"checkpoint": str(checkpoint), "top1": acc[1], "top5": acc[5]}
    if strategy is not None:
        heads = evaluate_heads(model, strategy, test_ds, cfg.seeds.bundle().stream("probe"), cfg.data.eval_batch_size)
        row.update({f"head_{name}": value for name, value in heads.items()})
    write_csv(pd.DataFrame([row]), Path(cfg.output_dir) / "eval.csv", "fm-eval/1")
    logger.info("[Eval] %s: top1 %.4f top5 %.4f", checkpoint, acc[1], acc[5])
    return row


def _write_derived(cfg: RunConfig, dataset, out_dir: Path, seeds):
    write_cifar_dir(dataset, out_dir)
    test_ds = load_cifar(cfg.data.root, cfg.data.version, "test")
    write_cifar_dir(test_ds, out_dir)
    write_provenance(dataset, out_dir / "provenance.yaml", seeds.as_dict())
    return {"output": str(out_dir), "num_images": len(dataset),
            "class_counts": dataset.class_counts().tolist()}


def run_corrupt(cfg: RunConfig):
    """cmd_corrupt: a label-noise copy of the training split, loadable as a data root."""
    noise = cfg.data.noise_spec()
    if noise is None:
        raise ConfigurationError("cmd_corrupt needs data.noise_kind symmetric or pair")
    preflight(cfg)
    seeds = cfg.seeds.bundle()
    train_ds = load_cifar(cfg.data.root, cfg.data.version, "train")
    corrupted = corrupt_labels(train_ds, noise, seeds.stream(noise.stream))
    flipped = int(np.sum(corrupted.labels != train_ds.labels))
    out = _write_derived(cfg, corrupted, Path(cfg.output_dir) / cfg.corrupt.output, seeds)
    return dict(out, flipped=flipped)


def run_subset(cfg: RunConfig):
    """cmd_subset: exactly `subset.per_class` training samples per class."""
    preflight(cfg)
    seeds = cfg.seeds.bundle()
    train_ds = load_cifar(cfg.data.root, cfg.data.version, "train")
    subset = subset_per_class(train_ds, cfg.subset.per_class, seeds.stream("subset"))
    return _write_derived(cfg, subset, Path(cfg.output_dir) / cfg.subset.output, seeds)


def run_probe(cfg: RunConfig):
    """cmd_probe: activation counts and CAMs per checkpoint, optionally the fixed-mask experiment."""
    preflight(cfg)
    out_dir = Path(cfg.output_dir) / "probe"
    checkpoints = list(cfg.probe.checkpoints) or [str(Path(cfg.output_dir) / "best.ckpt")]
    test_ds = load_cifar(cfg.data.root, cfg.data.version, "test")
    rows = []
    for n, checkpoint in enumerate(checkpoints):
        model, _ = _restore_model(cfg, checkpoint)
        stats = activation_counts(model, test_ds, cfg.probe.layer_ids, cfg.probe.threshold,
                                  cfg.probe.sample_count, rng=cfg.seeds.bundle().stream("probe"))
        tag = f"{n}_{Path(checkpoint).parent.name}_{Path(checkpoint).stem}"
        rows += [{"checkpoint": checkpoint, "layer": s.layer_id, "threshold": s.threshold,
                  "count_per_sample": s.count_per_sample, "sample_count": s.sample_count} for s in stats]
        _write_cams(model, test_ds, cfg.probe.cam_samples, out_dir / "cams" / tag)
    write_csv(pd.DataFrame(rows), out_dir / "activation_counts.csv", "fm-activations/1")
    results = {"checkpoints": len(checkpoints), "rows": len(rows)}
    if cfg.fm.active_sites:
        results["masks"] = len(_write_fm_masks(cfg, model, test_ds, out_dir / "masks"))
    if cfg.probe.fixed_mask_region:
        results["fixed_mask"] = _fixed_mask(cfg, out_dir / f"fixed_mask_{cfg.probe.fixed_mask_region}")
    return results


def _write_fm_masks(cfg: RunConfig, model, dataset, out_dir: Path):
    """One mask pair per FM site, drawn the way training draws them, as PGM files."""
    with no_grad():
        stages = {s.stage_id: s for s in model.forward_stages(make_batch(dataset, np.arange(1)).images)}
    rng = cfg.seeds.bundle().stream("mask")
    written = []
    for site in cfg.fm.active_sites:
        stage = stages[site]
        h, w = stage.spatial
        pair = sample_pair(w, h, cfg.fm.pairing, rng, kind=cfg.fm.mask_variant, channels=stage.channels)
        for part, mask in enumerate(pair, start=1):
            written.append(mask_image(mask, out_dir / f"{site}_part{part}.pgm"))
    logger.info("[Probe] wrote %d FM masks to %s", len(written), out_dir)
    return written


def _write_cams(model, dataset, count, out_dir: Path, mask=None):
    idx = np.arange(min(count, len(dataset)))
    batch = make_batch(dataset, idx)
    preds = eval_forward(model, batch).data.argmax(axis=1)
    for i in idx:
        cam = compute_cam(model, batch.images.data[i], int(preds[i]), mask=mask)
        write_cam(cam, out_dir / f"sample{i}_class{cam.class_id}", image_chw=dataset.images[i])


def _fixed_mask(cfg: RunConfig, out_dir: Path):
    seeds = cfg.seeds.bundle()
    train_ds, test_ds = load_datasets(cfg, seeds)
    last = conv_output_size(conv_output_size(cfg.model.image_size, 3, 2, 1), 3, 2, 1)
    mask = region_mask(last, last, cfg.probe.fixed_mask_region)
    exp = fixed_mask_training_experiment(cfg.model, mask, cfg.schedule, train_ds, seeds, test_dataset=test_ds,
                                         cam_samples=cfg.probe.cam_samples, optimizer=cfg.optimizer,
                                         augment=cfg.data.augment, progress=cfg.logging.progress)
    write_records(exp.records, out_dir / "metrics.csv")
    for i, cam in zip(exp.sample_indices, exp.cams):
        write_cam(cam, out_dir / f"sample{i}_class{cam.class_id}", image_chw=test_ds.images[i])
    return {"output": str(out_dir), "final_val_acc": exp.records[-1].val_acc}


def run_overhead(cfg: RunConfig):
    """cmd_overhead: sec/iter and peak memory for baseline, FM on one site and on two."""
    seeds = cfg.seeds.bundle()
    rows = overhead_table(cfg.model, cfg.overhead.batch_size, cfg.overhead.iters, seeds,
                          cfg.overhead.warmup, cfg.fm)
    df = overhead_ratios(pd.DataFrame(rows))
    write_csv(df, Path(cfg.output_dir) / "overhead.csv", "fm-overhead/1")
    return {"rows": df.to_dict(orient="records")}
