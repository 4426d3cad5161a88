"""Recover phase: synthesize a condensed dataset by pixel-space optimization.

Baseline mode mixes classes inside each synthesis batch and matches global
BN statistics; class-wise mode optimizes one class per batch against that
class's statistic rows. In both modes the classification term sees logits
produced with global running statistics.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from lpld import tensor as T
from lpld.errors import ConfigError, NonFiniteError
from lpld.optim import AdamState, adam_step
from lpld.squeeze import TeacherModel
from lpld.util import derive_rng, sha256_hex

MANIFEST_NAME = "manifest.json"


@dataclass
class RecoverConfig:
    iterations: int = 400
    image_lr: float = 0.25
    betas: tuple = (0.5, 0.9)
    alpha: float = 0.01
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class CondensedDataset:
    images: np.ndarray        # [num_classes*ipc, C, H, W] float32 in [0,1]
    labels: np.ndarray        # [num_classes*ipc] int64, class-major
    ipc: int
    mode: str                 # "baseline" | "lpld"
    num_classes: int
    teacher_checksum: str = ""
    norm_mean: list = field(default_factory=list)
    norm_std: list = field(default_factory=list)
    loss_history: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]

    def class_slice(self, c: int) -> slice:
        return slice(c * self.ipc, (c + 1) * self.ipc)


def bn_match_loss(batch_stats, targets):
    """Sum over layers of ||mu - RM||_2 + ||var - RV||_2 (channel-vector norms)."""
    if len(batch_stats) != len(targets):
        raise ConfigError(f"{len(batch_stats)} batch stat layers vs {len(targets)} targets")
    total = None
    for (mu, var), (rm, rv) in zip(batch_stats, targets):
        term = T.l2_norm(T.add(mu, -np.asarray(rm))) + T.l2_norm(T.add(var, -np.asarray(rv)))
        total = term if total is None else total + term
    if total is None:
        return T.Tensor(np.asarray(0.0, dtype=np.float32))
    return total


def _quantize_unit(images: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit export lattice so disk round-trips are exact."""
    return (np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _optimize_batch(net, pixels: np.ndarray, target_probs: np.ndarray, targets,
                    config: RecoverConfig, rng_tag: tuple) -> tuple[np.ndarray, list]:
    """Adam on one pixel batch; returns optimized pixels and the loss curve."""
    x = T.Tensor(pixels, requires_grad=True, name="pixels")
    opt = AdamState()
    history = []
    for it in range(config.iterations):
        logits, acts, _ = net.forward(x, mode="eval", stats="global", collect_bn=True)
        ce = T.softmax_cross_entropy(logits, target_probs)
        loss = ce
        if config.alpha > 0:
            stats = [(a.mean, a.var) for a in acts]
            loss = ce + config.alpha * bn_match_loss(stats, targets)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"synthesis loss became non-finite at iteration {it} ({rng_tag})")
        history.append(value)
        x.grad = None
        loss.backward()
        adam_step({"pixels": x}, opt, lr=config.image_lr, betas=config.betas)
    return x.data, history


def synthesize(teacher: TeacherModel, ipc: int, config: RecoverConfig,
               mode: str = "lpld") -> CondensedDataset:
    """Optimize num_classes * ipc images from random init.

    lpld: one class-pure batch per class (batch size = ipc), BN targets are
    that class's rows; classes run independently under per-class seeds.
    baseline: batches mix classes, BN targets are the global rows.
    """
    if mode not in ("baseline", "lpld"):
        raise ConfigError(f"unknown mode {mode!r}")
    net = teacher.net
    num_classes = teacher.num_classes
    if mode == "lpld" and not teacher.stats_estimated:
        raise ConfigError("lpld mode needs estimated class statistics (run estimate_class_stats)")
    bn_ids = net.bn_layer_ids()
    c_, h_, w_ = net.spec.input_shape
    all_pixels = np.zeros((num_classes * ipc, c_, h_, w_), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), ipc)
    history: dict = {}

    mean = net.norm_mean.reshape(1, -1, 1, 1)
    std = net.norm_std.reshape(1, -1, 1, 1)

    def init_pixels(rng, count):
        raw = rng.uniform(0.0, 1.0, size=(count, c_, h_, w_)).astype(np.float32)
        return (raw - mean) / std

    def run_class(c: int):
        rng = derive_rng(config.seed, "recover", mode, c)
        pixels = init_pixels(rng, ipc)
        targets = [(net.bn_states[lid].classwise_rm[c], net.bn_states[lid].classwise_rv[c])
                   for lid in bn_ids]
        probs = T.onehot(np.full(ipc, c), num_classes)
        out, curve = _optimize_batch(net, pixels, probs, targets, config, ("class", c))
        return c, out, curve

    def run_mixed(batch_idx: int, pair_block):
        rng = derive_rng(config.seed, "recover", mode, batch_idx)
        pixels = init_pixels(rng, len(pair_block))
        targets = [(net.bn_states[lid].global_rm, net.bn_states[lid].global_rv)
                   for lid in bn_ids]
        batch_labels = np.array([c for c, _ in pair_block])
        probs = T.onehot(batch_labels, num_classes)
        out, curve = _optimize_batch(net, pixels, probs, targets, config, ("batch", batch_idx))
        return batch_idx, pair_block, out, curve

    if mode == "lpld":
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                results = list(pool.map(run_class, range(num_classes)))
        else:
            results = [run_class(c) for c in range(num_classes)]
        for c, out, curve in results:
            all_pixels[c * ipc:(c + 1) * ipc] = out
            history[f"class{c}"] = curve
    else:
        # mixed batches of size ipc: consecutive (k, c) pairs span classes
        pairs = [(c, k) for k in range(ipc) for c in range(num_classes)]
        blocks = [pairs[i:i + ipc] for i in range(0, len(pairs), ipc)]
        tasks = list(enumerate(blocks))
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                results = list(pool.map(lambda t: run_mixed(*t), tasks))
        else:
            results = [run_mixed(i, b) for i, b in tasks]
        for batch_idx, block, out, curve in results:
            for row, (c, k) in enumerate(block):
                all_pixels[c * ipc + k] = out[row]
            history[f"batch{batch_idx}"] = curve

    images = _quantize_unit(net.denormalize(all_pixels))
    return CondensedDataset(images=images, labels=labels, ipc=ipc, mode=mode,
                            num_classes=num_classes, teacher_checksum=teacher_checksum(teacher),
                            norm_mean=net.norm_mean.tolist(), norm_std=net.norm_std.tolist(),
                            loss_history=history)


def teacher_checksum(teacher: TeacherModel) -> str:
    """Stable identity of the teacher: digest of its serialized state."""
    from lpld.layers import serialize_checkpoint
    tensors = teacher.net.state_tensors()
    tensors["meta.spec_json"] = np.frombuffer(
        teacher.net.spec.to_json().encode("utf-8"), dtype=np.uint8).astype(np.float32)
    # include class rows so stats re-estimation changes identity
    for lid in teacher.net.bn_layer_ids():
        st = teacher.net.bn_states[lid]
        tensors[f"{lid}.classwise_rm"] = st.classwise_rm
        tensors[f"{lid}.classwise_rv"] = st.classwise_rv
    return sha256_hex(serialize_checkpoint(tensors))


# ---- export / import -------------------------------------------------------

def export_images(dataset: CondensedDataset, out_dir) -> dict:
    """Write one lossless PNG per sample plus a manifest with checksums."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = dataset.images.shape[1]
    if c not in (1, 3):
        raise ConfigError(f"PNG export supports 1 or 3 channels, got {c}")
    samples = []
    for i in range(len(dataset)):
        cls = int(dataset.labels[i])
        idx = i - cls * dataset.ipc
        name = f"class{cls:04d}_{idx:04d}.png"
        arr = np.round(dataset.images[i] * 255.0).astype(np.uint8)
        img = Image.fromarray(arr[0], mode="L") if c == 1 else Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
        path = out / name
        img.save(path, format="PNG")
        samples.append({"file": name, "class": cls, "index": idx,
                        "sha256": sha256_hex(path.read_bytes())})
    manifest = {
        "num_classes": dataset.num_classes,
        "ipc": dataset.ipc,
        "mode": dataset.mode,
        "teacher_checksum": dataset.teacher_checksum,
        "norm_mean": dataset.norm_mean,
        "norm_std": dataset.norm_std,
        "samples": samples,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return manifest


def load_condensed(in_dir, verify: bool = True) -> CondensedDataset:
    """Read an exported condensed dataset back, verifying per-file checksums."""
    root = Path(in_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ConfigError(f"{root}: missing {MANIFEST_NAME}")
    manifest = json.loads(manifest_path.read_text())
    num_classes, ipc = manifest["num_classes"], manifest["ipc"]
    count = num_classes * ipc
    if len(manifest["samples"]) != count:
        raise ConfigError(f"{root}: manifest lists {len(manifest['samples'])} samples, expected {count}")
    images = None
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), ipc)
    for rec in manifest["samples"]:
        path = root / rec["file"]
        if not path.exists():
            raise ConfigError(f"{root}: missing sample file {rec['file']}")
        raw = path.read_bytes()
        if verify and sha256_hex(raw) != rec["sha256"]:
            raise ConfigError(f"{root}: checksum mismatch for {rec['file']}")
        arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        if images is None:
            images = np.zeros((count,) + arr.shape, dtype=np.float32)
        images[rec["class"] * ipc + rec["index"]] = arr
    return CondensedDataset(images=images, labels=labels, ipc=ipc, mode=manifest["mode"],
                            num_classes=num_classes, teacher_checksum=manifest["teacher_checksum"],
                            norm_mean=manifest.get("norm_mean", []),
                            norm_std=manifest.get("norm_std", []))


def export_contact_sheets(dataset: CondensedDataset, out_dir, cols: int = 10):
    """One grid image per class (inspection aid)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c, h, w = dataset.images.shape[1:]
    written = []
    for cls in range(dataset.num_classes):
        tiles = dataset.images[dataset.class_slice(cls)]
        n = tiles.shape[0]
        rows = (n + cols - 1) // cols
        sheet = np.zeros((c, rows * h, cols * w), dtype=np.float32)
        for i in range(n):
            r, col = divmod(i, cols)
            sheet[:, r * h:(r + 1) * h, col * w:(col + 1) * w] = tiles[i]
        arr = np.round(sheet * 255).astype(np.uint8)
        img = Image.fromarray(arr[0], "L") if c == 1 else Image.fromarray(arr.transpose(1, 2, 0), "RGB")
        path = out / f"class{cls:04d}_grid.png"
        img.save(path)
        written.append(str(path))
    return written
