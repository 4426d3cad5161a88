"""Labeled image datasets: the generated desk-scale corpus and a directory adapter."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from lpld.errors import ConfigError
from lpld.util import derive_rng


@dataclass
class LabeledDataset:
    """Images in [0,1] with integer class labels."""

    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def min_class_prob(self) -> float:
        counts = self.class_counts
        present = counts[counts > 0]
        return float(present.min() / len(self)) if present.size else 0.0

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and std over the whole set (std floored at 1e-3)."""
        mean = self.images.mean(axis=(0, 2, 3))
        std = np.maximum(self.images.std(axis=(0, 2, 3)), 1e-3)
        return mean.astype(np.float32), std.astype(np.float32)


def _smooth_pattern(rng: np.random.Generator, channels: int, size: int, grid: int = 4) -> np.ndarray:
    """Low-frequency pattern: coarse random grid upsampled bilinearly."""
    coarse = rng.uniform(0.15, 0.85, size=(channels, grid, grid))
    xs = np.linspace(0, grid - 1, size)
    x0 = np.clip(np.floor(xs).astype(int), 0, grid - 2)
    frac = xs - x0
    rows = coarse[:, x0, :] * (1 - frac)[None, :, None] + coarse[:, x0 + 1, :] * frac[None, :, None]
    out = rows[:, :, x0] * (1 - frac)[None, None, :] + rows[:, :, x0 + 1] * frac[None, None, :]
    return out


def make_toy_dataset(num_classes: int = 10, per_class: int = 500, image_size: int = 32,
                     channels: int = 3, noise: float = 0.18, seed: int = 0,
                     class_counts=None) -> LabeledDataset:
    """Gaussian class prototypes plus pixel noise; CI-runnable stand-in corpus."""
    rng = derive_rng(seed, "toy-protos")
    protos = np.stack([_smooth_pattern(rng, channels, image_size) for _ in range(num_classes)])
    if class_counts is None:
        class_counts = [per_class] * num_classes
    if len(class_counts) != num_classes:
        raise ConfigError("class_counts length must equal num_classes")
    images, labels = [], []
    for c, count in enumerate(class_counts):
        crng = derive_rng(seed, "toy-class", c)
        samples = protos[c][None] + noise * crng.standard_normal((count, channels, image_size, image_size))
        images.append(np.clip(samples, 0.0, 1.0))
        labels.append(np.full(count, c, dtype=np.int64))
    return LabeledDataset(np.concatenate(images).astype(np.float32),
                          np.concatenate(labels), num_classes)


def make_toy_splits(num_classes: int = 10, per_class: int = 500, test_per_class: int = 100,
                    image_size: int = 32, channels: int = 3, noise: float = 0.18,
                    seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test splits: same class prototypes, independent noise draws."""
    train = make_toy_dataset(num_classes, per_class, image_size, channels, noise, seed)
    prng = derive_rng(seed, "toy-protos")
    protos = np.stack([_smooth_pattern(prng, channels, image_size) for _ in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), test_per_class)
    rng = derive_rng(seed, "toy-test-noise")
    test_images = np.clip(
        protos[labels] + noise * rng.standard_normal((labels.size, channels, image_size, image_size)),
        0.0, 1.0)
    return train, LabeledDataset(test_images.astype(np.float32), labels, num_classes)


def load_image_dir(path) -> LabeledDataset:
    """Adapter for a directory with one subdirectory of images per class.

    Class ids follow the sorted subdirectory names.
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ConfigError(f"{root}: no class subdirectories")
    images, labels = [], []
    for cid, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in (".png", ".bmp", ".jpg", ".jpeg"))
        for f in files:
            arr = np.asarray(Image.open(f), dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(cid)
    if not images:
        raise ConfigError(f"{root}: no images found")
    stacked = np.stack(images)
    return LabeledDataset(stacked, np.asarray(labels), num_classes=len(class_dirs))


def iter_batches(dataset: LabeledDataset, batch_size: int, rng: np.random.Generator,
                 drop_last: bool = False):
    """Shuffled (images, labels) minibatches for one epoch."""
    order = rng.permutation(len(dataset))
    limit = len(order) - (len(order) % batch_size) if drop_last else len(order)
    for start in range(0, limit, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
