# core/data_feed.py
"""CIFAR binary ingestion, label corruption, per-class subsets and batching."""
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from core.errors import ConfigurationError, DataFormatError
from core.rng import RngStream
from core.tensor import Tensor

logger = logging.getLogger(__name__)

IMAGE_BYTES = 3 * 32 * 32
RECORD_BYTES = {10: 1 + IMAGE_BYTES, 100: 2 + IMAGE_BYTES}
CIFAR_FILES = {
    (10, "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    (10, "test"): ["test_batch.bin"],
    (100, "train"): ["train.bin"],
    (100, "test"): ["test.bin"],
}
CIFAR_SUBDIRS = {10: "cifar-10-batches-bin", 100: "cifar-100-binary"}
# community-standard per-channel statistics
CIFAR_STATS = {
    10: ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    100: ((0.5071, 0.4866, 0.4409), (0.2673, 0.2564, 0.2762)),
}


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"
    epsilon: float = 0.0
    stream: str = "noise"

    def validate(self):
        if self.kind not in ("symmetric", "pair"):
            raise ConfigurationError(f"noise kind must be symmetric or pair, got {self.kind!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigurationError(f"noise epsilon must be in [0, 1), got {self.epsilon}")
        return self


@dataclass(frozen=True)
class Provenance:
    sources: tuple
    version: int
    split: str
    corruption: Optional[dict] = None
    subset: Optional[dict] = None

    def to_dict(self):
        d = asdict(self)
        d["sources"] = list(self.sources)
        return d


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    provenance: Provenance
    coarse_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        for arr in (self.images, self.labels, self.coarse_labels):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return int(self.labels.shape[0])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, indices):
        indices = np.asarray(indices)
        return replace(self, images=self.images[indices].copy(), labels=self.labels[indices].copy(),
                       coarse_labels=None if self.coarse_labels is None else self.coarse_labels[indices].copy())


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    images: Tensor
    labels: np.ndarray
    mixup_state: Optional[tuple] = None
    indices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.shape[0] < 1 or self.images.shape[0] != len(self.labels):
            raise ConfigurationError("a batch needs at least one image and one label per image")


def _round_half_up(value):
    return int(math.floor(value + 0.5))


def resolve_files(path, version, split):
    path = Path(path)
    if path.is_file():
        return [path]
    for base in (path, path / CIFAR_SUBDIRS[version]):
        files = [base / name for name in CIFAR_FILES[(version, split)]]
        if all(f.exists() for f in files):
            return files
    raise ConfigurationError(f"CIFAR-{version} {split} files not found under {path}")


def _parse_records(raw: bytes, version, source):
    rec = RECORD_BYTES[version]
    if len(raw) % rec:
        whole = len(raw) // rec
        raise DataFormatError(f"{source}: size {len(raw)} is not a multiple of the {rec}-byte record", whole * rec)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    images = records[:, -IMAGE_BYTES:].reshape(-1, 3, 32, 32)
    labels = records[:, rec - IMAGE_BYTES - 1].astype(np.int64)
    coarse = records[:, 0].astype(np.int64) if version == 100 else None
    bad = np.flatnonzero(labels >= version)
    if bad.size:
        raise DataFormatError(f"{source}: label {labels[bad[0]]} out of range", int(bad[0]) * rec)
    return images, labels, coarse


def load_cifar(path, version=10, split="train") -> Dataset:
    """Read CIFAR-10 (3073-byte records) or CIFAR-100 (3074-byte, fine label) binaries."""
    if version not in RECORD_BYTES:
        raise ConfigurationError(f"CIFAR version must be 10 or 100, got {version}")
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be train or test, got {split!r}")
    files = resolve_files(path, version, split)
    parts = [_parse_records(f.read_bytes(), version, f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    coarse = np.concatenate([p[2] for p in parts]) if version == 100 else None
    if len(labels) == 0:
        raise DataFormatError(f"{files[0]}: no records", 0)
    logger.info("[DataFeed] loaded CIFAR-%d %s: %d images from %d file(s)", version, split, len(labels), len(files))
    return Dataset(images, labels, version, split, Provenance(tuple(str(f) for f in files), version, split),
                   coarse_labels=coarse)


def encode_cifar(dataset: Dataset) -> bytes:
    n = len(dataset)
    version = dataset.num_classes
    records = np.empty((n, RECORD_BYTES[version]), dtype=np.uint8)
    if version == 100:
        coarse = dataset.coarse_labels if dataset.coarse_labels is not None else np.zeros(n, dtype=np.int64)
        records[:, 0] = coarse
    records[:, -IMAGE_BYTES - 1] = dataset.labels
    records[:, -IMAGE_BYTES:] = dataset.images.reshape(n, IMAGE_BYTES)
    return records.tobytes()


def write_cifar(dataset: Dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_cifar(dataset))
    return path


def write_cifar_dir(dataset: Dataset, directory):
    """Write under the standard file names, splitting the records evenly over them."""
    directory = Path(directory)
    names = CIFAR_FILES[(dataset.num_classes, dataset.split)]
    chunks = np.array_split(np.arange(len(dataset)), len(names))
    return [write_cifar(dataset.take(idx), directory / name) for name, idx in zip(names, chunks)]


def write_provenance(dataset: Dataset, path, seeds=None):
    payload = {"num_images": len(dataset), "num_classes": dataset.num_classes,
               "class_counts": dataset.class_counts().tolist(), **dataset.provenance.to_dict()}
    if seeds:
        payload["seeds"] = dict(seeds)
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=False), encoding="utf8")
    return path


def corrupt_labels(dataset: Dataset, spec: NoiseSpec, rng: RngStream) -> Dataset:
    """
    Flip exactly round(epsilon * N) labels. Symmetric picks a uniform label
    among the other classes; pair maps i -> (i + 1) mod num_classes.
    """
    spec.validate()
    if dataset.split != "train":
        raise ConfigurationError("label noise is only applied to the training split")
    n, c = len(dataset), dataset.num_classes
    count = _round_half_up(spec.epsilon * n)
    draw = rng.counter
    gen = rng.next_generator()
    chosen = np.sort(gen.permutation(n)[:count])
    labels = dataset.labels.copy()
    if spec.kind == "symmetric":
        labels[chosen] = (labels[chosen] + gen.integers(1, c, size=count)) % c
    else:
        labels[chosen] = (labels[chosen] + 1) % c
    corruption = {"kind": spec.kind, "epsilon": float(spec.epsilon), "count": count,
                  "stream": rng.name, "seed": rng.seed, "counter": draw}
    logger.info("[DataFeed] %s noise eps=%.3f: %d of %d labels flipped", spec.kind, spec.epsilon, count, n)
    return replace(dataset, labels=labels, provenance=replace(dataset.provenance, corruption=corruption))


def subset_per_class(dataset: Dataset, k, rng: RngStream) -> Dataset:
    """Exactly k samples per class, drawn without replacement; original order kept."""
    counts = dataset.class_counts()
    if k < 1 or k > counts.min():
        raise ConfigurationError(f"subset size {k} per class exceeds the smallest class ({counts.min()})")
    draw = rng.counter
    gen = rng.next_generator()
    chosen = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        chosen.append(gen.choice(members, size=k, replace=False))
    indices = np.sort(np.concatenate(chosen))
    subset = {"per_class": int(k), "stream": rng.name, "seed": rng.seed, "counter": draw}
    out = dataset.take(indices)
    return replace(out, provenance=replace(dataset.provenance, subset=subset))


def batch_indices(n, batch_size, rng: RngStream = None, drop_last=False):
    """Index arrays for one epoch; shuffled when a stream is given."""
    order = rng.next_generator().permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    return [order[i:i + batch_size] for i in range(0, stop, batch_size)]


def prefetch(iterable, depth=2):
    """Produce items on a worker thread through a bounded queue; order is preserved."""
    if depth <= 0:
        yield from iterable
        return
    q = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()
    errors = []

    def put(item):
        while not stop.is_set():
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for item in iterable:
                if not put(item):
                    return
        except BaseException as e:
            errors.append(e)
        finally:
            put(done)

    t = threading.Thread(target=worker, name="batch-prefetch", daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            yield item
    finally:
        stop.set()
        t.join()
    if errors:
        raise errors[0]
