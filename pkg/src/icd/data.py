"""Synthetic prototype dataset, CIFAR binary reader, and seeded batching."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import serialize
from .errors import ConfigurationError, FormatError
from .tensor import Tensor

CIFAR_PIXELS = 3 * 32 * 32


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 8
    image_size: int = 32
    train_size: int = 2000
    test_size: int = 500
    seed: int = 0
    noise: float = 0.25
    shift: int = 2
    patches: int = 4
    path: str | None = None
    variant: str = "cifar100"

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.image_size <= 0 or self.train_size <= 0 or self.test_size <= 0:
            raise ConfigurationError("sizes must be positive")
        if self.kind == "cifar" and not self.path:
            raise ConfigurationError("cifar datasets need a path")


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W] float64
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __len__(self):
        return len(self.labels)


@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray


# -- synthetic ---------------------------------------------------------------

def make_prototypes(num_classes: int, image_size: int, patches: int, rng: np.random.Generator) -> np.ndarray:
    """One image per class made of ``patches`` random colored rectangles on black."""
    protos = np.zeros((num_classes, 3, image_size, image_size))
    lo, hi = max(2, image_size // 8), max(3, image_size // 3)
    for k in range(num_classes):
        for _ in range(patches):
            h, w = rng.integers(lo, hi + 1, size=2)
            r = rng.integers(0, image_size - h + 1)
            c = rng.integers(0, image_size - w + 1)
            protos[k, :, r:r + h, c:c + w] = rng.uniform(0.0, 1.0, size=3)[:, None, None]
    return protos


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill (no wrap-around)."""
    out = np.zeros_like(img)
    H, W = img.shape[-2:]
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def _synth_split(protos, n, noise, shift, rng) -> Dataset:
    K = len(protos)
    labels = rng.integers(0, K, size=n)
    offsets = rng.integers(-shift, shift + 1, size=(n, 2))
    images = np.empty((n,) + protos.shape[1:])
    for i in range(n):
        images[i] = shift_image(protos[labels[i]], int(offsets[i, 0]), int(offsets[i, 1]))
    images += noise * rng.standard_normal(images.shape)
    return Dataset(images, labels.astype(np.int64), K)


def synth_generate(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Unnormalized (train, test) splits; fully determined by ``spec.seed``."""
    if spec.kind != "synthetic":
        raise ConfigurationError("synth_generate needs kind='synthetic'")
    rng = np.random.default_rng(spec.seed)
    protos = make_prototypes(spec.num_classes, spec.image_size, spec.patches, rng)
    train = _synth_split(protos, spec.train_size, spec.noise, spec.shift, rng)
    test = _synth_split(protos, spec.test_size, spec.noise, spec.shift, rng)
    return train, test


# -- CIFAR binary ------------------------------------------------------------

def cifar_read(path, variant: str = "cifar100", num_classes: int | None = None,
               mean=None, std=None) -> Dataset:
    """Parse a CIFAR-10/100 binary batch file.

    Pixels are scaled to [0, 1]; when ``mean``/``std`` are given they are
    applied per channel.
    """
    if variant not in ("cifar10", "cifar100"):
        raise ConfigurationError(f"unknown CIFAR variant {variant!r}")
    n_labels = 1 if variant == "cifar10" else 2
    rec = n_labels + CIFAR_PIXELS
    K = num_classes or (10 if variant == "cifar10" else 100)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % rec:
        whole = raw.size // rec
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {rec}; "
                          f"partial record at byte offset {whole * rec}")
    records = raw.reshape(-1, rec)
    labels = records[:, n_labels - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= K)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: label {labels[i]} >= {K} in record {i} (byte offset {i * rec + n_labels - 1})")
    images = records[:, n_labels:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    if mean is not None:
        images = normalize(images, mean, std)
    return Dataset(images, labels, K)


def _cifar_files(spec: DatasetSpec) -> tuple[list[Path], list[Path]]:
    root = Path(spec.path)
    if root.is_file():
        return [root], [root]
    if spec.variant == "cifar10":
        return sorted(root.glob("data_batch_*.bin")), [root / "test_batch.bin"]
    return [root / "train.bin"], [root / "test.bin"]


def _concat(parts: list[Dataset]) -> Dataset:
    return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                   parts[0].num_classes)


# -- normalization and loading -----------------------------------------------

def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (images - mean) / std


def load_dataset(spec: DatasetSpec, mean=None, std=None) -> tuple[Dataset, Dataset, dict]:
    """Normalized (train, test) plus the normalization constants used.

    Without explicit ``mean``/``std`` the train split's own statistics are used.
    """
    if spec.kind == "synthetic":
        train, test = synth_generate(spec)
    else:
        tr_files, te_files = _cifar_files(spec)
        train = _concat([cifar_read(f, spec.variant, spec.num_classes) for f in tr_files])
        test = _concat([cifar_read(f, spec.variant, spec.num_classes) for f in te_files])
        train = Dataset(train.images[:spec.train_size], train.labels[:spec.train_size], spec.num_classes)
        test = Dataset(test.images[:spec.test_size], test.labels[:spec.test_size], spec.num_classes)
    if mean is None:
        mean, std = channel_stats(train.images)
    std = np.where(np.asarray(std) > 0, std, 1.0)
    train = replace(train, images=normalize(train.images, mean, std))
    test = replace(test, images=normalize(test.images, mean, std))
    return train, test, {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def export_dataset(path, ds: Dataset) -> None:
    """Images then labels (as float64) as two consecutive ICDT blobs."""
    with open(path, "wb") as fh:
        serialize.write_tensor(fh, ds.images)
        serialize.write_tensor(fh, ds.labels.astype(np.float64))


def import_dataset(path, num_classes: int) -> Dataset:
    with open(path, "rb") as fh:
        images = serialize.read_tensor(fh)
        labels = serialize.read_tensor(fh).astype(np.int64)
    return Dataset(images, labels, num_classes)


# -- batching ----------------------------------------------------------------

def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip (p=0.5) and random crop from a reflect-padded image."""
    n, _, H, W = images.shape
    flips = rng.random(n) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(images)
    for i in range(n):
        y, x = offs[i]
        crop = padded[i, :, y:y + H, x:x + W]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batches(ds: Dataset, batch_size: int, seed: int | None = None, epoch: int = 0,
            augment: bool = False) -> Iterator[Batch]:
    """Seeded shuffle (+ optional augmentation) when ``seed`` is given; in order otherwise."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    n = len(ds)
    if seed is None:
        order, rng = np.arange(n), None
    else:
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        imgs = ds.images[idx]
        if augment and rng is not None:
            imgs = augment_batch(imgs, rng)
        yield Batch(Tensor(imgs), ds.labels[idx])
