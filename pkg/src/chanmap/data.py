"""Datasets: the CIFAR-10 binary format and a synthetic class-blob generator."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DTYPE, make_rng

RECORD_BYTES = 3073
CIFAR_CLASSES = 10
# per-channel statistics of the CIFAR-10 training set
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
DATA_ENV = "CHANMAP_DATA"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] float32
    labels: np.ndarray  # [n] int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.classes, split or self.split)

    def split_validation(self, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
        """Seeded (train, val) partition holding out ``fraction`` of the samples."""
        if not 0 < fraction < 1:
            raise DataError(f"validation fraction must lie in (0, 1), got {fraction}")
        perm = make_rng(seed).permutation(len(self))
        n_val = max(1, int(round(fraction * len(self))))
        return self.subset(np.sort(perm[n_val:]), "train"), self.subset(np.sort(perm[:n_val]), "val")


# -------------------------------------------------------------------- CIFAR
def _cifar_files(path: Path, split: str) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataError(f"no CIFAR-10 data at {path}")
    pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
    files = sorted(path.glob(pattern)) or sorted(path.glob(f"*/{pattern}"))
    if not files:
        raise DataError(f"no {pattern} under {path}")
    return files


def decode_cifar_records(raw: bytes, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Split raw CIFAR-10 bytes into uint8 images [n, 3, 32, 32] and labels.

    ``offset`` is the index of the first record, used in error messages.
    """
    if len(raw) % RECORD_BYTES:
        raise DataError(f"truncated record {offset + len(raw) // RECORD_BYTES}: {len(raw) % RECORD_BYTES} trailing bytes")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"record {offset + i}: label byte {labels[i]} >= {CIFAR_CLASSES}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_binary(
    path: str | Path | None = None,
    limit: int | None = None,
    seed: int = 0,
    split: str = "train",
    mean=CIFAR_MEAN,
    std=CIFAR_STD,
) -> Dataset:
    """Load CIFAR-10 binary batches from a file or directory.

    Pixels are scaled to [0, 1] and normalized per channel. With ``limit`` a
    seeded shuffle picks the subset. ``path`` defaults to ``$CHANMAP_DATA``.
    """
    if path is None:
        if DATA_ENV not in os.environ:
            raise DataError(f"no data path given and ${DATA_ENV} is unset")
        path = os.environ[DATA_ENV]
    images, labels, count = [], [], 0
    for f in _cifar_files(Path(path), split):
        x, y = decode_cifar_records(f.read_bytes(), count)
        images.append(x)
        labels.append(y)
        count += len(y)
    x = np.concatenate(images)
    y = np.concatenate(labels)
    if limit is not None and limit < len(y):
        idx = np.sort(make_rng(seed).permutation(len(y))[:limit])
        x, y = x[idx], y[idx]
    x = x.astype(DTYPE) / 255.0
    x = (x - np.asarray(mean, DTYPE)[:, None, None]) / np.asarray(std, DTYPE)[:, None, None]
    return Dataset(x, y, CIFAR_CLASSES, split)


def encode_cifar_record(image: np.ndarray, label: int) -> bytes:
    """One 3073-byte record from a uint8 [3, 32, 32] image."""
    image = np.asarray(image, dtype=np.uint8)
    if image.shape != (3, 32, 32):
        raise DataError(f"CIFAR records hold 3x32x32 images, got {image.shape}")
    return bytes([label]) + image.tobytes()


# ---------------------------------------------------------------- synthetic
def gen_synthetic(
    classes: int = 10,
    n: int = 1000,
    seed: int = 0,
    shape: tuple[int, int, int] = (3, 32, 32),
    noise: float = 1.0,
    split: str = "train",
) -> Dataset:
    """Gaussian class blobs in image space.

    Class ``k`` has a prototype made of a per-channel offset plus a smooth
    low-frequency stripe pattern; samples add i.i.d. Gaussian pixel noise of
    std ``noise``. Prototypes are drawn once from ``seed`` (so every split
    generated with the same seed shares them), and samples come from a
    second stream keyed on ``split``. Labels cycle through the classes, so the
    histogram is balanced within one.
    """
    if classes < 2:
        raise DataError("gen_synthetic needs at least two classes")
    c, h, w = shape
    proto_rng = make_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    protos = np.empty((classes, c, h, w))
    for k in range(classes):
        offset = proto_rng.uniform(-1.0, 1.0, size=c)
        fy, fx = proto_rng.integers(1, 4, size=2)
        phase = proto_rng.uniform(0, 2 * np.pi, size=c)
        stripes = np.sin(2 * np.pi * (fy * yy[None] + fx * xx[None]) + phase[:, None, None])
        protos[k] = offset[:, None, None] + 0.5 * stripes
    sample_rng = make_rng([seed, sum(map(ord, split))])
    labels = np.arange(n) % classes
    sample_rng.shuffle(labels)
    images = protos[labels] + noise * sample_rng.standard_normal((n, c, h, w))
    return Dataset(images.astype(DTYPE), labels, classes, split)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of assigning each test sample to the closest training class mean."""
    flat = train.images.reshape(len(train), -1).astype(np.float64)
    centroids = np.stack([flat[train.labels == k].mean(axis=0) for k in range(train.classes)])
    t = test.images.reshape(len(test), -1).astype(np.float64)
    d = ((t[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == test.labels).mean())
