"""Dataset ingestion: CIFAR-10 binary batches and synthetic blob images."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    x: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    y: np.ndarray  # (N,) int64
    classes: int

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.classes)


def parse_cifar10_records(blob: bytes, classes: int = 10) -> Dataset:
    """Decode ``label + 3072 CHW pixel bytes`` records."""
    if len(blob) % RECORD_BYTES:
        offset = len(blob) - len(blob) % RECORD_BYTES
        raise DataError(
            f"truncated record: {len(blob) % RECORD_BYTES} trailing bytes, need {RECORD_BYTES}",
            offset,
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {labels[i]} out of range [0, {classes - 1}]", i * RECORD_BYTES)
    x = raw[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float32) / np.float32(255.0)
    return Dataset(x, labels, classes)


def load_cifar10_binary(path) -> Dataset:
    """Load one ``.bin`` file, or a directory holding the five training batches."""
    path = Path(path)
    files = [path / f for f in CIFAR_TRAIN_FILES] if path.is_dir() else [path]
    parts = []
    for f in files:
        if not f.exists():
            raise DataError(f"missing CIFAR-10 file {f}", 0)
        try:
            parts.append(parse_cifar10_records(f.read_bytes()))
        except DataError as exc:
            raise DataError(f"{f}: {exc.detail}", exc.offset) from None
    return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]), 10)


def save_cifar10_binary(dataset: Dataset, path) -> None:
    """Inverse of :func:`parse_cifar10_records` (pixels are rounded to bytes)."""
    pixels = np.clip(np.rint(dataset.x * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.y.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


def class_templates(classes: int, image_size: int, seed: int) -> np.ndarray:
    """One smooth colour-blob image per class, values in [0.1, 0.9]."""
    rng = np.random.default_rng([seed, 7])
    grid = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    out = np.empty((classes, 3, image_size, image_size))
    for c in range(classes):
        img = np.zeros((3, image_size, image_size))
        for _ in range(3):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            width = rng.uniform(0.12, 0.3)
            colour = rng.uniform(-1.0, 1.0, size=3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            img += colour[:, None, None] * blob
        img -= img.min()
        img /= max(img.max(), 1e-12)
        out[c] = 0.1 + 0.8 * img
    return out


def generate_synthetic(
    classes: int = 4,
    samples: int = 1024,
    image_size: int = 16,
    noise: float = 0.1,
    seed: int = 0,
    template_seed: int | None = None,
) -> Dataset:
    """Class templates plus i.i.d. Gaussian pixel noise, clipped to [0, 1].

    Labels cycle through the classes before shuffling, so the histogram is
    exactly balanced whenever ``samples`` is a multiple of ``classes``.
    Draws sharing ``template_seed`` (default ``seed``) come from the same
    task, which is how a held-out test set is made.
    """
    if classes < 2:
        raise DataError(f"need at least 2 classes, got {classes}", 0)
    rng = np.random.default_rng(seed)
    templates = class_templates(classes, image_size, seed if template_seed is None else template_seed)
    y = rng.permutation(np.arange(samples) % classes).astype(np.int64)
    x = templates[y] + noise * rng.standard_normal((samples, 3, image_size, image_size))
    return Dataset(np.clip(x, 0.0, 1.0).astype(np.float32), y, classes)


def split(dataset: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple:
    """Deterministic (train, validation) split."""
    order = np.random.default_rng([seed, 90]).permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Zero-pad, random crop back to size, random horizontal flip."""
    n, _, h, w = x.shape
    out = np.empty_like(x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batches(
    dataset: Dataset,
    batch_size: int,
    rng: np.random.Generator | None = None,
    train: bool = False,
    augmented: bool = True,
):
    """Yield ``(x, y)`` minibatches; shuffling and augmentation only when ``train``."""
    n = len(dataset)
    order = rng.permutation(n) if train and rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = dataset.x[idx]
        if train and augmented and rng is not None:
            x = augment(x, rng)
        yield x, dataset.y[idx]
