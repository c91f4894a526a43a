"""MNIST-family (IDX) and CIFAR-10 (binary) loaders, standardization and batching.

Raw pixel bytes are kept alongside the standardized float32 images so a
loaded split can be written back out bit-exactly.  Labels are 0-based class
indices.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}
DATASETS = {
    "mnist": (1, 28, 28),
    "fashion_mnist": (1, 28, 28),
    "cifar10": (3, 32, 32),
}


@dataclass
class Dataset:
    raw: np.ndarray  # uint8, (n, c, h, w)
    labels: np.ndarray  # int64, 0-based
    split: str
    name: str
    mean: np.ndarray
    std: np.ndarray
    classes: int = 10

    def __post_init__(self):
        if self.raw.shape[0] != self.labels.shape[0]:
            raise DataFormatError(f"{self.raw.shape[0]} images but {self.labels.shape[0]} labels")
        self.images = standardize(self.raw, self.mean, self.std)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple:
        return self.raw.shape[1:]

    def subset(self, count: int) -> "Dataset":
        """The first ``count`` samples (all of them if ``count`` is 0 or too large)."""
        if not count or count >= len(self):
            return self
        return Dataset(self.raw[:count], self.labels[:count], self.split, self.name, self.mean, self.std,
                       self.classes)


def channel_stats(raw: np.ndarray):
    """Per-channel mean and std of pixels scaled to [0, 1]."""
    x = raw.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def standardize(raw: np.ndarray, mean, std) -> np.ndarray:
    x = raw.astype(np.float32) / np.float32(255.0)
    x -= np.asarray(mean, np.float32)[None, :, None, None]
    x /= np.asarray(std, np.float32)[None, :, None, None]
    return x


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx_images(path) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 16:
        raise DataFormatError(f"{path}: {len(buf)} bytes is too short for an IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + n * rows * cols
    if len(buf) != expected:
        raise DataFormatError(f"{path}: length {len(buf)} bytes, header implies {expected}")
    return np.frombuffer(buf, np.uint8, offset=16).reshape(n, 1, rows, cols).copy()


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 8:
        raise DataFormatError(f"{path}: {len(buf)} bytes is too short for an IDX label header")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(buf) != 8 + n:
        raise DataFormatError(f"{path}: length {len(buf)} bytes, header implies {8 + n}")
    return np.frombuffer(buf, np.uint8, offset=8).astype(np.int64)


def write_idx_images(path, raw: np.ndarray):
    n, c, h, w = raw.shape
    if c != 1:
        raise DataFormatError(f"IDX images are single-channel, got {c} channels")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(np.ascontiguousarray(raw, np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(np.asarray(labels, np.uint8).tobytes())


def load_idx(images_path, labels_path, stats=None, name: str = "mnist", split: str = "train") -> Dataset:
    """Load an IDX image/label pair.

    ``stats`` is a ``(mean, std)`` pair from the training split; when omitted
    the split's own statistics are used.
    """
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images_path} holds {raw.shape[0]} images but {labels_path} {labels.shape[0]} labels")
    mean, std = stats if stats is not None else channel_stats(raw)
    return Dataset(raw, labels, split, name, np.asarray(mean), np.asarray(std))


def read_cifar10(paths):
    raws, labels = [], []
    for path in paths:
        buf = _read_bytes(path)
        if len(buf) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD}-byte records")
        rec = np.frombuffer(buf, np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        raws.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(raws), np.concatenate(labels)


def load_cifar10(paths, stats=None, split: str = "train") -> Dataset:
    raw, labels = read_cifar10(paths)
    mean, std = stats if stats is not None else channel_stats(raw)
    return Dataset(raw, labels, split, "cifar10", np.asarray(mean), np.asarray(std))


def load_dataset(name: str, root, train_subset: int = 0, test_subset: int = 0):
    """Load ``(train, test)`` from a directory of standard release files.

    Standardization statistics come from the (possibly subset) training split
    and are applied to both splits.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    if name in ("mnist", "fashion_mnist"):
        tr_raw = read_idx_images(root / MNIST_FILES["train"][0])
        tr_lab = read_idx_labels(root / MNIST_FILES["train"][1])
        te_raw = read_idx_images(root / MNIST_FILES["test"][0])
        te_lab = read_idx_labels(root / MNIST_FILES["test"][1])
        for raw, lab, split in ((tr_raw, tr_lab, "train"), (te_raw, te_lab, "test")):
            if raw.shape[0] != lab.shape[0]:
                raise DataFormatError(f"{name} {split}: {raw.shape[0]} images vs {lab.shape[0]} labels")
    elif name == "cifar10":
        tr_raw, tr_lab = read_cifar10([root / f for f in CIFAR_FILES["train"]])
        te_raw, te_lab = read_cifar10([root / f for f in CIFAR_FILES["test"]])
    else:
        raise DataFormatError(f"unknown dataset {name!r}; expected one of {sorted(DATASETS)}")
    if train_subset:
        tr_raw, tr_lab = tr_raw[:train_subset], tr_lab[:train_subset]
    if test_subset:
        te_raw, te_lab = te_raw[:test_subset], te_lab[:test_subset]
    mean, std = channel_stats(tr_raw)
    train = Dataset(tr_raw, tr_lab, "train", name, mean, std)
    test = Dataset(te_raw, te_lab, "test", name, mean, std)
    return train, test


def epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch])


def permutation(n: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def batches(dataset: Dataset, batch_size: int = 128, seed=0, shuffle: bool = True) -> Iterator:
    """Yield ``(images, labels)`` covering the split exactly once, last batch partial."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = permutation(n, seed) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def eval_batches(dataset: Dataset, batch_size: int = 500) -> Iterator:
    return batches(dataset, batch_size, shuffle=False)


def fingerprint(raw_image: np.ndarray) -> str:
    """Stable hash of one image's raw bytes."""
    return hashlib.blake2b(np.ascontiguousarray(raw_image).tobytes(), digest_size=16).hexdigest()


def find_dataset_dir(name: str, root: Optional[os.PathLike] = None) -> Path:
    """Resolve the dataset directory: explicit ``root``, then ``$CWCNET_DATA/<name>``."""
    if root:
        return Path(root)
    base = os.environ.get("CWCNET_DATA", "data")
    return Path(base) / name
