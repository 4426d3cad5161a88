"""Relabel phase: pre-generate augmentation records and teacher soft labels.

Each stored record replays one training batch exactly: per-image crop boxes
and flip bits, the batch mixing permutation with its lambda and bounding box,
and the teacher's full logits in float16. Records live in a compact
little-endian file with an offset index for random access.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from lpld import tensor as T
from lpld.errors import ConfigError, LabelStoreError, NonFiniteError
from lpld.recover import CondensedDataset
from lpld.squeeze import TeacherModel
from lpld.util import derive_rng, json_hash

STORE_MAGIC = b"LPLDLBL1"
STORE_VERSION = 1
HEADER_SIZE = 8 + 2 + 5 * 4 + 32 + 32  # magic, version, five u32 fields, two hashes


@dataclass
class AugConfig:
    """Augmentation policy replayed at training time."""

    crop_scale: tuple = (0.08, 1.0)
    crop_ratio: tuple = (0.75, 4.0 / 3.0)
    flip_prob: float = 0.5
    mix: str = "cutmix"  # "cutmix" | "mixup" | "none"
    mix_alpha: float = 1.0
    enabled: bool = True

    def to_dict(self) -> dict:
        return {
            "crop_scale": list(self.crop_scale),
            "crop_ratio": list(self.crop_ratio),
            "flip_prob": self.flip_prob,
            "mix": self.mix,
            "mix_alpha": self.mix_alpha,
            "enabled": self.enabled,
        }

    def hash32(self) -> bytes:
        return json_hash(self.to_dict())

    @classmethod
    def disabled(cls) -> "AugConfig":
        return cls(enabled=False)


@dataclass
class AugmentationRecord:
    crops: np.ndarray       # [B, 4] uint16 (x, y, w, h) within the source image
    flips: np.ndarray       # [B] uint8 in {0, 1}
    partners: np.ndarray    # [B] uint16, permutation of batch positions
    mix_lambda: float       # adjusted lambda in [0, 1]
    mix_bbox: tuple         # (x, y, w, h) uint16; (0,0,0,0) means no paste region

    def validate(self, batch_size: int, image_hw: tuple):
        h, w = image_hw
        if self.crops.shape != (batch_size, 4):
            raise ConfigError(f"crops shape {self.crops.shape} != ({batch_size}, 4)")
        if np.any(self.crops[:, 0] + self.crops[:, 2] > w) or np.any(self.crops[:, 1] + self.crops[:, 3] > h):
            raise ConfigError("crop box exceeds source bounds")
        if sorted(self.partners.tolist()) != list(range(batch_size)):
            raise ConfigError("partners is not a permutation of the batch")
        if not 0.0 <= self.mix_lambda <= 1.0:
            raise ConfigError(f"lambda {self.mix_lambda} outside [0,1]")


@dataclass
class SoftLabelBatch:
    epoch: int
    batch_index: int
    image_indices: np.ndarray  # [B] uint32 into the condensed dataset
    aug: AugmentationRecord
    logits: np.ndarray         # [B, num_classes] float16


@dataclass
class StoreHeader:
    num_classes: int
    ipc: int
    batch_size: int
    epochs: int
    batches_per_epoch: int
    aug_hash: bytes = b"\x00" * 32
    teacher_checksum: bytes = b"\x00" * 32

    @property
    def num_records(self) -> int:
        return self.epochs * self.batches_per_epoch

    def pack(self) -> bytes:
        return (STORE_MAGIC + struct.pack("<H", STORE_VERSION)
                + struct.pack("<5I", self.num_classes, self.ipc, self.batch_size,
                              self.epochs, self.batches_per_epoch)
                + self.aug_hash + self.teacher_checksum)


@dataclass
class LabelStore:
    header: StoreHeader
    records: list[SoftLabelBatch] = field(default_factory=list)

    def header_hash(self) -> bytes:
        from lpld.util import sha256_bytes
        return sha256_bytes(self.header.pack())

    def record(self, epoch: int, batch: int) -> SoftLabelBatch:
        idx = epoch * self.header.batches_per_epoch + batch
        if not 0 <= idx < len(self.records):
            raise LabelStoreError(f"record ({epoch}, {batch}) out of range")
        return self.records[idx]


def record_size_bytes(batch_size: int, num_classes: int) -> int:
    """Fixed on-disk record size: ids, crops, flip bits, partners, mix, logits."""
    return (8 + 4 * batch_size + 8 * batch_size + (batch_size + 7) // 8
            + 2 * batch_size + 4 + 8 + 2 * batch_size * num_classes)


def store_file_bytes(header: StoreHeader) -> int:
    n = header.num_records
    return HEADER_SIZE + 8 * n + n * record_size_bytes(header.batch_size, header.num_classes)


def augmentation_metadata_bytes(batch_size: int) -> int:
    """Bytes per record spent on replay metadata (crops, flips, partners, mix)."""
    return 8 * batch_size + (batch_size + 7) // 8 + 2 * batch_size + 4 + 8


def logits_bytes(batch_size: int, num_classes: int) -> int:
    return 2 * batch_size * num_classes


# ---- augmentation sampling and replay --------------------------------------

def _sample_crop(rng: np.random.Generator, h: int, w: int, scale, ratio) -> tuple:
    """RandomResizedCrop box; falls back to the full image after 10 attempts."""
    area = h * w
    log_ratio = (np.log(ratio[0]), np.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = np.exp(rng.uniform(*log_ratio))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            x = int(rng.integers(0, w - cw + 1))
            y = int(rng.integers(0, h - ch + 1))
            return x, y, cw, ch
    return 0, 0, w, h


def _cutmix_bbox(rng: np.random.Generator, h: int, w: int, lam: float) -> tuple:
    """Standard area rule: box side scales with sqrt(1 - lambda), center uniform."""
    cut = np.sqrt(1.0 - lam)
    bw, bh = int(w * cut), int(h * cut)
    cx = int(rng.integers(0, w))
    cy = int(rng.integers(0, h))
    x1 = np.clip(cx - bw // 2, 0, w)
    y1 = np.clip(cy - bh // 2, 0, h)
    x2 = np.clip(cx + bw // 2, 0, w)
    y2 = np.clip(cy + bh // 2, 0, h)
    return int(x1), int(y1), int(x2 - x1), int(y2 - y1)


def sample_augmentation(rng: np.random.Generator, batch_size: int, image_hw: tuple,
                        config: AugConfig) -> AugmentationRecord:
    """Draw one batch's augmentation parameters.

    Disabled configs produce the identity record: full-image crops, no flips,
    identity permutation, lambda 1 with an empty box.
    """
    h, w = image_hw
    if not config.enabled:
        crops = np.tile(np.array([0, 0, w, h], dtype=np.uint16), (batch_size, 1))
        return AugmentationRecord(crops=crops,
                                  flips=np.zeros(batch_size, dtype=np.uint8),
                                  partners=np.arange(batch_size, dtype=np.uint16),
                                  mix_lambda=1.0, mix_bbox=(0, 0, 0, 0))
    crops = np.zeros((batch_size, 4), dtype=np.uint16)
    for i in range(batch_size):
        crops[i] = _sample_crop(rng, h, w, config.crop_scale, config.crop_ratio)
    flips = (rng.random(batch_size) < config.flip_prob).astype(np.uint8)
    partners = rng.permutation(batch_size).astype(np.uint16)
    if config.mix == "cutmix":
        lam_raw = float(rng.beta(config.mix_alpha, config.mix_alpha))
        bbox = _cutmix_bbox(rng, h, w, lam_raw)
        lam_adj = 1.0 - (bbox[2] * bbox[3]) / (h * w)
        return AugmentationRecord(crops, flips, partners, lam_adj, bbox)
    if config.mix == "mixup":
        lam = float(rng.beta(config.mix_alpha, config.mix_alpha))
        return AugmentationRecord(crops, flips, partners, lam, (0, 0, 0, 0))
    return AugmentationRecord(crops, flips, partners, 1.0, (0, 0, 0, 0))


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic bilinear resize of [C, h, w]; identity when sizes match."""
    c, h, w = img.shape
    if h == out_h and w == out_w:
        return img.copy()
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[None, :, None]
    fx = (xs - x0).astype(np.float32)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def apply_augmentation(record: AugmentationRecord, images: np.ndarray) -> np.ndarray:
    """Replay crop -> resize -> flip -> mix exactly as encoded; deterministic."""
    batch = np.asarray(images, dtype=np.float32)
    b, c, h, w = batch.shape
    if record.crops.shape[0] != b:
        raise LabelStoreError(f"record batch size {record.crops.shape[0]} != images {b}")
    if np.any(record.partners >= b):
        raise LabelStoreError("partner index out of range")
    out = np.empty_like(batch)
    for i in range(b):
        x, y, cw, ch = (int(v) for v in record.crops[i])
        if cw == 0 or ch == 0 or x + cw > w or y + ch > h:
            raise LabelStoreError(f"invalid crop box {(x, y, cw, ch)} for image {i}")
        cropped = batch[i][:, y:y + ch, x:x + cw]
        resized = _resize_bilinear(cropped, h, w)
        out[i] = resized[:, :, ::-1] if record.flips[i] else resized
    bx, by, bw, bh = (int(v) for v in record.mix_bbox)
    if bw > 0 and bh > 0:
        mixed = out.copy()
        src = out[record.partners.astype(np.int64)]
        mixed[:, :, by:by + bh, bx:bx + bw] = src[:, :, by:by + bh, bx:bx + bw]
        return mixed
    if record.mix_lambda < 1.0:
        lam = np.float32(record.mix_lambda)
        return lam * out + (1 - lam) * out[record.partners.astype(np.int64)]
    return out


def mixed_targets(record: AugmentationRecord, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot targets blended by the record's lambda (for ground-truth terms)."""
    base = T.onehot(labels, num_classes)
    if record.mix_lambda >= 1.0:
        return base
    lam = np.float32(record.mix_lambda)
    return lam * base + (1 - lam) * base[record.partners.astype(np.int64)]


# ---- generation --------------------------------------------------------------

def generate_labels(teacher: TeacherModel, condensed: CondensedDataset, epochs: int,
                    batch_size: int, aug_config: AugConfig, seed: int = 0) -> LabelStore:
    """Run the teacher over every epoch's augmented batches and keep the logits.

    Epoch order shuffles the condensed indices; the last incomplete batch of
    each epoch is excluded so all records share one size.
    """
    from lpld.recover import teacher_checksum

    net = teacher.net
    n = len(condensed)
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    batches_per_epoch = n // batch_size
    hw = condensed.images.shape[2:]
    header = StoreHeader(
        num_classes=condensed.num_classes, ipc=condensed.ipc, batch_size=batch_size,
        epochs=epochs, batches_per_epoch=batches_per_epoch,
        aug_hash=aug_config.hash32(),
        teacher_checksum=bytes.fromhex(teacher_checksum(teacher)))
    store = LabelStore(header=header)
    with T.no_grad():
        for epoch in range(epochs):
            order = derive_rng(seed, "relabel-order", epoch).permutation(n)
            for b in range(batches_per_epoch):
                idx = order[b * batch_size:(b + 1) * batch_size].astype(np.uint32)
                rng = derive_rng(seed, "relabel-aug", epoch, b)
                record = sample_augmentation(rng, batch_size, hw, aug_config)
                augmented = apply_augmentation(record, condensed.images[idx])
                logits, _, _ = net.forward(net.normalize(augmented), mode="eval")
                if not np.all(np.isfinite(logits.data)):
                    raise NonFiniteError(f"non-finite logits at epoch {epoch} batch {b}")
                store.records.append(SoftLabelBatch(
                    epoch=epoch, batch_index=b, image_indices=idx, aug=record,
                    logits=logits.data.astype(np.float16)))
    return store


# ---- binary io ----------------------------------------------------------------

def _pack_record(rec: SoftLabelBatch, batch_size: int, num_classes: int) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<II", rec.epoch, rec.batch_index))
    buf.write(np.ascontiguousarray(rec.image_indices, dtype="<u4").tobytes())
    buf.write(np.ascontiguousarray(rec.aug.crops, dtype="<u2").tobytes())
    buf.write(np.packbits(rec.aug.flips.astype(bool), bitorder="little").tobytes())
    buf.write(np.ascontiguousarray(rec.aug.partners, dtype="<u2").tobytes())
    buf.write(struct.pack("<f", rec.aug.mix_lambda))
    buf.write(struct.pack("<4H", *rec.aug.mix_bbox))
    buf.write(np.ascontiguousarray(rec.logits, dtype="<f2").tobytes())
    out = buf.getvalue()
    expect = record_size_bytes(batch_size, num_classes)
    if len(out) != expect:
        raise LabelStoreError(f"record packed to {len(out)} bytes, expected {expect}")
    return out


def save_label_store(store: LabelStore, path) -> int:
    """Write header, offset index, then fixed-size records. Returns byte count."""
    h = store.header
    if len(store.records) != h.num_records:
        raise LabelStoreError(f"store has {len(store.records)} records, header says {h.num_records}")
    rec_size = record_size_bytes(h.batch_size, h.num_classes)
    records_start = HEADER_SIZE + 8 * h.num_records
    offsets = np.arange(h.num_records, dtype="<u8") * rec_size + records_start
    with open(path, "wb") as f:
        f.write(h.pack())
        f.write(offsets.tobytes())
        for rec in store.records:
            f.write(_pack_record(rec, h.batch_size, h.num_classes))
    return records_start + rec_size * h.num_records


class LabelStoreFile:
    """Random-access reader with full validation against the physical file size."""

    def __init__(self, path):
        self.path = str(path)
        with open(path, "rb") as f:
            self.data = f.read()
        d = self.data
        if len(d) < HEADER_SIZE:
            raise LabelStoreError(f"{self.path}: file shorter than header")
        if d[:8] != STORE_MAGIC:
            raise LabelStoreError(f"{self.path}: bad magic")
        (version,) = struct.unpack_from("<H", d, 8)
        if version != STORE_VERSION:
            raise LabelStoreError(f"{self.path}: unsupported version {version}")
        nc, ipc, bs, ep, bpe = struct.unpack_from("<5I", d, 10)
        if min(nc, bs, ep, bpe) < 1 or ipc < 1:
            raise LabelStoreError(f"{self.path}: degenerate header field")
        aug_hash = d[30:62]
        teacher = d[62:94]
        self.header = StoreHeader(nc, ipc, bs, ep, bpe, aug_hash, teacher)
        n = self.header.num_records
        self.rec_size = record_size_bytes(bs, nc)
        expected = HEADER_SIZE + 8 * n + self.rec_size * n
        if len(d) != expected:
            raise LabelStoreError(f"{self.path}: size {len(d)} != expected {expected} (truncated or corrupt)")
        self.offsets = np.frombuffer(d, dtype="<u8", count=n, offset=HEADER_SIZE)
        self.records_start = HEADER_SIZE + 8 * n

    def header_hash(self) -> bytes:
        from lpld.util import sha256_bytes
        return sha256_bytes(self.data[:HEADER_SIZE])

    def read_record(self, index: int) -> SoftLabelBatch:
        h = self.header
        if not 0 <= index < h.num_records:
            raise LabelStoreError(f"{self.path}: record index {index} out of range")
        off = int(self.offsets[index])
        if off < self.records_start or off + self.rec_size > len(self.data):
            raise LabelStoreError(f"{self.path}: index entry {index} points outside the file")
        d = self.data
        b, c = h.batch_size, h.num_classes
        epoch, batch_index = struct.unpack_from("<II", d, off)
        p = off + 8
        idx = np.frombuffer(d, dtype="<u4", count=b, offset=p).copy(); p += 4 * b
        crops = np.frombuffer(d, dtype="<u2", count=4 * b, offset=p).reshape(b, 4).copy(); p += 8 * b
        nflip = (b + 7) // 8
        flips = np.unpackbits(np.frombuffer(d, dtype=np.uint8, count=nflip, offset=p),
                              bitorder="little")[:b].astype(np.uint8); p += nflip
        partners = np.frombuffer(d, dtype="<u2", count=b, offset=p).copy(); p += 2 * b
        (lam,) = struct.unpack_from("<f", d, p); p += 4
        bbox = struct.unpack_from("<4H", d, p); p += 8
        logits = np.frombuffer(d, dtype="<f2", count=b * c, offset=p).reshape(b, c).copy()
        aug = AugmentationRecord(crops=crops, flips=flips, partners=partners,
                                 mix_lambda=float(lam), mix_bbox=tuple(int(v) for v in bbox))
        return SoftLabelBatch(epoch=epoch, batch_index=batch_index, image_indices=idx,
                              aug=aug, logits=logits)

    def record_at(self, epoch: int, batch: int) -> SoftLabelBatch:
        h = self.header
        if not (0 <= epoch < h.epochs and 0 <= batch < h.batches_per_epoch):
            raise LabelStoreError(f"{self.path}: record ({epoch}, {batch}) out of range")
        return self.read_record(epoch * h.batches_per_epoch + batch)

    def load(self) -> LabelStore:
        store = LabelStore(header=self.header)
        store.records = [self.read_record(i) for i in range(self.header.num_records)]
        return store


def load_label_store(path) -> LabelStore:
    return LabelStoreFile(path).load()
