"""Diversity analytics: within-class feature similarity and real-vs-synthetic MMD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lpld.errors import ConfigError
from lpld.squeeze import TeacherModel


@dataclass
class FeatureSet:
    features: np.ndarray  # [N, d]
    labels: np.ndarray    # [N]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConfigError(f"features must be [N, d], got {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError("features and labels disagree on N")
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(norms == 0):
            raise ConfigError("zero-norm feature rows are not allowed")


def extract_features(teacher: TeacherModel, images: np.ndarray, labels,
                     batch_size: int = 256) -> FeatureSet:
    """Embeddings from the layer feeding the classifier head, eval-global mode."""
    net = teacher.net
    feats = []
    for start in range(0, images.shape[0], batch_size):
        x = net.normalize(images[start:start + batch_size])
        feats.append(net.penultimate_features(x))
    return FeatureSet(np.concatenate(feats), np.asarray(labels))


def within_class_cosine(fs: FeatureSet):
    """Mean cosine similarity over unordered same-class pairs.

    Returns (per_class dict, overall mean, overall std); the overall numbers
    aggregate the per-class means. Classes with fewer than two samples are
    skipped.
    """
    normed = fs.features / np.linalg.norm(fs.features, axis=1, keepdims=True)
    per_class = {}
    skipped = []
    for c in np.unique(fs.labels):
        rows = normed[fs.labels == c]
        n = rows.shape[0]
        if n < 2:
            skipped.append(int(c))
            continue
        gram = rows @ rows.T
        total = (gram.sum() - np.trace(gram)) / 2.0
        per_class[int(c)] = float(total / (n * (n - 1) / 2))
    if not per_class:
        raise ConfigError("no class has two or more samples")
    values = np.array(list(per_class.values()))
    return per_class, float(values.mean()), float(values.std()), skipped


def _gaussian_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-sq / (2.0 * bandwidth ** 2))


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled rows (the usual heuristic)."""
    pooled = np.concatenate([a, b])
    sq = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(axis=2)
    upper = sq[np.triu_indices(pooled.shape[0], k=1)]
    med = float(np.sqrt(np.median(upper)))
    return med if med > 0 else 1.0


def mmd_squared(real: FeatureSet, syn: FeatureSet, bandwidth: float | None = None) -> float:
    """Biased squared MMD with a Gaussian kernel: K_TT + K_SS - 2 K_TS.

    All pairs count, self-pairs included, so the estimate is nonnegative.
    Bandwidth defaults to the median pairwise distance on the pooled sets.
    """
    a, b = real.features, syn.features
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ConfigError("both feature sets must be nonempty")
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    k_tt = _gaussian_kernel(a, a, bandwidth).mean()
    k_ss = _gaussian_kernel(b, b, bandwidth).mean()
    k_ts = _gaussian_kernel(a, b, bandwidth).mean()
    return float(k_tt + k_ss - 2.0 * k_ts)
