"""Label pools: prune the pre-generated store and resample it for training.

Pruning runs at epoch granularity (keep whole source epochs) or batch
granularity (keep individual records, letting a training epoch recombine
batches from different source epochs). Rule-based metrics, pool calibration,
and the top-K quantization baseline live here too, along with byte-accurate
storage accounting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lpld import tensor as T
from lpld.errors import ConfigError, LabelStoreError
from lpld.relabel import (
    HEADER_SIZE,
    LabelStore,
    SoftLabelBatch,
    record_size_bytes,
    store_file_bytes,
)
from lpld.util import derive_rng, sha256_bytes

POOL_MAGIC = b"LPLDPOL1"
POOL_VERSION = 1

METRICS = ("correct", "diff", "diff_signed", "cut_ratio", "confidence")


@dataclass
class LabelPool:
    store: LabelStore
    kept_ids: np.ndarray  # sorted unique record ids
    granularity: str      # "epoch" | "batch"
    keep_ratio: float
    seed: int = 0

    def __post_init__(self):
        self.kept_ids = np.asarray(self.kept_ids, dtype=np.int64)
        n = self.store.header.num_records
        if self.kept_ids.size == 0:
            raise ConfigError("pool keeps zero records")
        if np.unique(self.kept_ids).size != self.kept_ids.size:
            raise ConfigError("kept ids contain duplicates")
        if self.kept_ids.min() < 0 or self.kept_ids.max() >= n:
            raise ConfigError("kept ids out of range")

    def __len__(self):
        return self.kept_ids.size

    @property
    def kept_epochs(self) -> np.ndarray:
        bpe = self.store.header.batches_per_epoch
        return np.unique(self.kept_ids // bpe)

    def records(self):
        return [self.store.records[i] for i in self.kept_ids]


@dataclass
class LabelScore:
    record_id: int
    metric: str
    value: float


@dataclass
class RestrictedStore:
    """A store narrowed to a calibrated subset of record ids."""

    store: LabelStore
    allowed: np.ndarray


@dataclass
class StorageReport:
    image_bytes: int
    label_bytes: int
    ratio: float
    compression: float


def _resolve(store_like) -> tuple[LabelStore, np.ndarray]:
    if isinstance(store_like, RestrictedStore):
        return store_like.store, np.asarray(store_like.allowed, dtype=np.int64)
    return store_like, np.arange(store_like.header.num_records, dtype=np.int64)


def prune_random(store_like, granularity: str, keep_ratio: float, seed: int = 0) -> LabelPool:
    """Uniform pruning without replacement over epochs or over records."""
    store, candidates = _resolve(store_like)
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must be in (0,1], got {keep_ratio}")
    if granularity not in ("epoch", "batch"):
        raise ConfigError(f"unknown granularity {granularity!r}")
    rng = derive_rng(seed, "prune-random", granularity)
    if granularity == "epoch":
        if isinstance(store_like, RestrictedStore):
            raise ConfigError("epoch-granularity pruning on a calibrated store is undefined")
        epochs = store.header.epochs
        keep = round(keep_ratio * epochs)
        if keep < 1:
            raise ConfigError(f"keep_ratio {keep_ratio} keeps zero of {epochs} epochs")
        kept_epochs = np.sort(rng.choice(epochs, size=keep, replace=False))
        bpe = store.header.batches_per_epoch
        ids = (kept_epochs[:, None] * bpe + np.arange(bpe)[None, :]).reshape(-1)
    else:
        total = candidates.size
        keep = round(keep_ratio * total)
        if keep < 1:
            raise ConfigError(f"keep_ratio {keep_ratio} keeps zero of {total} records")
        ids = np.sort(rng.choice(candidates, size=keep, replace=False))
    return LabelPool(store=store, kept_ids=ids, granularity=granularity,
                     keep_ratio=keep_ratio, seed=seed)


def score_labels(store: LabelStore, image_labels, metric: str) -> list[LabelScore]:
    """Per-record pruning scores from the cached teacher outputs.

    correct: count of images whose argmax matches the hard label.
    diff: mean gap between the two largest logits.
    diff_signed: mean signed margin of the true class over the best other.
    cut_ratio: the record's adjusted mix lambda.
    confidence: mean max softmax probability.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}, expected one of {METRICS}")
    labels = np.asarray(image_labels, dtype=np.int64)
    out = []
    for rid, rec in enumerate(store.records):
        logits = rec.logits.astype(np.float32)
        if metric == "cut_ratio":
            value = float(rec.aug.mix_lambda)
        elif metric == "correct":
            hard = labels[rec.image_indices.astype(np.int64)]
            value = float((logits.argmax(axis=1) == hard).sum())
        elif metric == "confidence":
            value = float(T.softmax(logits).max(axis=1).mean())
        else:
            part = np.partition(logits, -2, axis=1)
            top1, top2 = part[:, -1], part[:, -2]
            if metric == "diff":
                value = float((top1 - top2).mean())
            else:  # diff_signed
                hard = labels[rec.image_indices.astype(np.int64)]
                true_logit = logits[np.arange(logits.shape[0]), hard]
                masked = logits.copy()
                masked[np.arange(logits.shape[0]), hard] = -np.inf
                value = float((true_logit - masked.max(axis=1)).mean())
        out.append(LabelScore(record_id=rid, metric=metric, value=value))
    return out


def prune_by_metric(store: LabelStore, scores: list[LabelScore], mode: str,
                    keep_ratio: float) -> LabelPool:
    """Keep records by score rank: easy = highest, hard = lowest, uniform = evenly
    spaced ranks. Ties break by record id."""
    if mode not in ("easy", "hard", "uniform"):
        raise ConfigError(f"unknown mode {mode!r}")
    n = store.header.num_records
    if len(scores) != n:
        raise ConfigError(f"{len(scores)} scores for {n} records")
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must be in (0,1], got {keep_ratio}")
    keep = round(keep_ratio * n)
    if keep < 1:
        raise ConfigError(f"keep_ratio {keep_ratio} keeps zero of {n} records")
    values = np.array([s.value for s in sorted(scores, key=lambda s: s.record_id)])
    # descending score, record id breaks ties
    order = np.lexsort((np.arange(n), -values))
    if mode == "easy":
        ids = order[:keep]
    elif mode == "hard":
        ids = np.lexsort((np.arange(n), values))[:keep]
    else:
        ranks = (np.arange(keep) * n) // keep
        ids = order[ranks]
    return LabelPool(store=store, kept_ids=np.sort(ids), granularity="batch",
                     keep_ratio=keep_ratio, seed=0)


def calibrate_pool(store: LabelStore, confidence_scores: list[LabelScore],
                   easy_trim: float, hard_trim: float) -> RestrictedStore:
    """Drop the highest-confidence (easy) and lowest-confidence (hard) fractions."""
    if easy_trim < 0 or hard_trim < 0 or easy_trim + hard_trim >= 1.0:
        raise ConfigError(f"trims ({easy_trim}, {hard_trim}) must be nonnegative and sum below 1")
    n = store.header.num_records
    if len(confidence_scores) != n:
        raise ConfigError(f"{len(confidence_scores)} scores for {n} records")
    n_easy = round(easy_trim * n)
    n_hard = round(hard_trim * n)
    if n_easy + n_hard >= n:
        raise ConfigError(f"trims remove all {n} records")
    values = np.array([s.value for s in sorted(confidence_scores, key=lambda s: s.record_id)])
    order = np.lexsort((np.arange(n), -values))  # descending confidence
    middle = order[n_easy:n - n_hard]
    return RestrictedStore(store=store, allowed=np.sort(middle))


# ---- FKD-style top-K quantization baseline ---------------------------------

@dataclass
class QuantizedRecord:
    indices: np.ndarray  # [B, K] uint16 class ids, by descending probability
    values: np.ndarray   # [B, K] float16 probabilities
    strategy: str        # "smoothing" | "renorm"
    num_classes: int
    stored_bytes: int

    def reconstruct(self) -> np.ndarray:
        """Full [B, num_classes] distributions."""
        b, k = self.indices.shape
        out = np.zeros((b, self.num_classes), dtype=np.float32)
        vals = self.values.astype(np.float32)
        rows = np.arange(b)[:, None]
        if self.strategy == "renorm":
            sums = vals.sum(axis=1, keepdims=True)
            out[rows, self.indices.astype(np.int64)] = vals / np.maximum(sums, 1e-12)
            return out
        out[rows, self.indices.astype(np.int64)] = vals
        if k < self.num_classes:
            residual = np.clip(1.0 - vals.sum(axis=1), 0.0, None)
            fill = residual / (self.num_classes - k)
            mask = np.ones((b, self.num_classes), dtype=bool)
            mask[rows, self.indices.astype(np.int64)] = False
            out[mask] += np.repeat(fill, self.num_classes - k)
        return out


def quantize_topk(record: SoftLabelBatch, k: int, strategy: str = "renorm") -> QuantizedRecord:
    """Keep each image's top-K probabilities plus their class indices.

    Storage counts values and indices both (two bytes each), which halves the
    nominal num_classes/K compression rate.
    """
    if strategy not in ("smoothing", "renorm"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    num_classes = record.logits.shape[1]
    if not 1 <= k <= num_classes:
        raise ConfigError(f"K must be in [1, {num_classes}], got {k}")
    probs = T.softmax(record.logits.astype(np.float32))
    b = probs.shape[0]
    # descending probability, class id breaks ties
    order = np.lexsort((np.broadcast_to(np.arange(num_classes), probs.shape), -probs), axis=1)
    idx = order[:, :k].astype(np.uint16)
    vals = np.take_along_axis(probs, idx.astype(np.int64), axis=1).astype(np.float16)
    return QuantizedRecord(indices=idx, values=vals, strategy=strategy,
                           num_classes=num_classes, stored_bytes=4 * b * k)


def topk_compression(num_classes: int, k: int) -> float:
    """Actual compression of the logits component: values + indices both count."""
    return num_classes / (2.0 * k)


# ---- the two random processes ------------------------------------------------

def sample_training_stream(pool: LabelPool, epochs_to_train: int, batches_per_epoch: int,
                           seed: int = 0) -> np.ndarray:
    """Record ids consumed by a training run, epoch by epoch.

    Batch granularity draws ids uniformly with replacement, so one synthetic
    epoch mixes records from different source epochs. Epoch granularity
    replays one uniformly chosen kept source epoch per training epoch, in
    stored batch order (cycled or truncated to batches_per_epoch).
    """
    if len(pool) == 0:
        raise ConfigError("empty pool")
    rng = derive_rng(seed, "stream", pool.granularity)
    out = np.empty(epochs_to_train * batches_per_epoch, dtype=np.int64)
    if pool.granularity == "batch":
        for e in range(epochs_to_train):
            out[e * batches_per_epoch:(e + 1) * batches_per_epoch] = rng.choice(
                pool.kept_ids, size=batches_per_epoch, replace=True)
        return out
    bpe = pool.store.header.batches_per_epoch
    epochs = pool.kept_epochs
    for e in range(epochs_to_train):
        src = int(epochs[rng.integers(0, epochs.size)])
        ids = src * bpe + (np.arange(batches_per_epoch) % bpe)
        out[e * batches_per_epoch:(e + 1) * batches_per_epoch] = ids
    return out


# ---- storage accounting --------------------------------------------------------

def pruned_store_bytes(store: LabelStore, kept: int) -> int:
    h = store.header
    return HEADER_SIZE + 8 * kept + kept * record_size_bytes(h.batch_size, h.num_classes)


def condensed_image_bytes(condensed_or_dir) -> int:
    """Exported file bytes when given a directory, raw 8-bit bytes otherwise."""
    if isinstance(condensed_or_dir, (str, Path)):
        root = Path(condensed_or_dir)
        return sum(p.stat().st_size for p in root.glob("*.png"))
    images = condensed_or_dir.images
    return int(np.prod(images.shape))


def storage_report(store_or_pool, condensed_or_dir) -> StorageReport:
    """Byte-accurate image/label sizes, their ratio, and the compression factor."""
    image_bytes = condensed_image_bytes(condensed_or_dir)
    if isinstance(store_or_pool, LabelPool):
        pool = store_or_pool
        total = pool.store.header.num_records
        kept = len(pool)
        label_bytes = pruned_store_bytes(pool.store, kept)
        compression = total / kept
    else:
        store = store_or_pool
        label_bytes = store_file_bytes(store.header)
        compression = 1.0
    return StorageReport(image_bytes=image_bytes, label_bytes=label_bytes,
                         ratio=label_bytes / max(image_bytes, 1), compression=compression)


def project_label_storage(num_classes: int, ipc: int, epochs: int, batch_size: int) -> dict:
    """Projected store size at arbitrary scale (float16 logits, full records)."""
    rec = record_size_bytes(batch_size, num_classes)
    per_image_per_epoch = (rec + 8) / batch_size  # record plus its index entry
    per_image = per_image_per_epoch * epochs
    total_images = num_classes * ipc
    batches = (total_images // batch_size) * epochs
    total = HEADER_SIZE + batches * (rec + 8)
    return {
        "per_image_bytes": per_image,
        "total_bytes": total,
        "records": batches,
        "record_bytes": rec,
    }


# ---- pool file io ----------------------------------------------------------------

def save_pool(pool: LabelPool, path, store_header_hash: bytes) -> int:
    """Pool file: magic, version, store header hash, granularity, keep ratio,
    seed, then the kept-id list as u64 little-endian."""
    if len(store_header_hash) != 32:
        raise LabelStoreError("store header hash must be 32 bytes")
    gran = 0 if pool.granularity == "epoch" else 1
    blob = (POOL_MAGIC + struct.pack("<H", POOL_VERSION) + store_header_hash
            + struct.pack("<BdQQ", gran, pool.keep_ratio, pool.seed, len(pool))
            + np.ascontiguousarray(pool.kept_ids, dtype="<u8").tobytes())
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def load_pool(path, store: LabelStore, expected_store_hash: bytes | None = None) -> LabelPool:
    with open(path, "rb") as f:
        data = f.read()
    fixed = 8 + 2 + 32 + struct.calcsize("<BdQQ")
    if len(data) < fixed:
        raise LabelStoreError(f"{path}: file shorter than pool header")
    if data[:8] != POOL_MAGIC:
        raise LabelStoreError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<H", data, 8)
    if version != POOL_VERSION:
        raise LabelStoreError(f"{path}: unsupported version {version}")
    store_hash = data[10:42]
    gran, keep_ratio, seed, count = struct.unpack_from("<BdQQ", data, 42)
    if gran not in (0, 1):
        raise LabelStoreError(f"{path}: bad granularity byte {gran}")
    if len(data) != fixed + 8 * count:
        raise LabelStoreError(f"{path}: size {len(data)} != expected {fixed + 8 * count}")
    if expected_store_hash is not None and store_hash != expected_store_hash:
        raise LabelStoreError(f"{path}: pool belongs to a different label store")
    ids = np.frombuffer(data, dtype="<u8", count=count, offset=fixed).astype(np.int64)
    if ids.size and (np.unique(ids).size != ids.size or ids.max() >= store.header.num_records):
        raise LabelStoreError(f"{path}: kept ids invalid for this store")
    try:
        return LabelPool(store=store, kept_ids=ids,
                         granularity="epoch" if gran == 0 else "batch",
                         keep_ratio=float(keep_ratio), seed=int(seed))
    except ConfigError as e:
        raise LabelStoreError(f"{path}: {e}") from e
