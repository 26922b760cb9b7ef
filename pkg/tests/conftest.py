import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure repository root is on sys.path so sibling packages (core, training, etc.) can be imported
root = Path(__file__).resolve().parent.parent
if str(root) not in sys.path:
    sys.path.insert(0, str(root))

CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long accuracy runs, enabled with FM_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("FM_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set FM_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def cifar_records(labels, version=10, seed=0, coarse=None):
    """Raw CIFAR records built byte by byte: [coarse,] label, 3072 pixels."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    pixels = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
    head = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if version == 100:
        c = np.zeros(n, dtype=np.uint8) if coarse is None else np.asarray(coarse, dtype=np.uint8)
        head.insert(0, c[:, None])
    return np.concatenate(head + [pixels], axis=1).tobytes()


def write_cifar_root(directory, version=10, train_per_class=4, test_per_class=2, seed=0):
    """A tiny CIFAR directory in the standard layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train_labels = np.tile(np.arange(version), train_per_class)
    test_labels = np.tile(np.arange(version), test_per_class)
    if version == 10:
        chunks = np.array_split(train_labels, len(CIFAR10_TRAIN))
        for i, (name, chunk) in enumerate(zip(CIFAR10_TRAIN, chunks)):
            (directory / name).write_bytes(cifar_records(chunk, 10, seed + i))
        (directory / "test_batch.bin").write_bytes(cifar_records(test_labels, 10, seed + 99))
    else:
        coarse = train_labels // 5
        (directory / "train.bin").write_bytes(cifar_records(train_labels, 100, seed, coarse))
        (directory / "test.bin").write_bytes(cifar_records(test_labels, 100, seed + 99, test_labels // 5))
    return directory


@pytest.fixture
def cifar10_root(tmp_path):
    return write_cifar_root(tmp_path / "cifar10", version=10)


@pytest.fixture
def cifar100_root(tmp_path):
    return write_cifar_root(tmp_path / "cifar100", version=100, train_per_class=2, test_per_class=1)
