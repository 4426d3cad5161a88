"""Squeeze phase: pretrain the teacher, then estimate per-class BN statistics.

The estimation pass runs one epoch of mixed shuffled batches with every
parameter frozen; each batch contributes one EMA update per class present,
computed from that class subset's per-channel moments at every BN layer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from lpld import tensor as T
from lpld.bn import (
    BoundInputs,
    class_stats_file_bytes,
    required_updates,
    save_class_stats,
    update_running,
)
from lpld.data import LabeledDataset, iter_batches
from lpld.errors import NonFiniteError
from lpld.layers import Network, NetworkSpec
from lpld.optim import AdamState, adam_step, cosine_lr
from lpld.util import derive_rng


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0


@dataclass
class TeacherModel:
    net: Network
    top1_accuracy: float = 0.0
    stats_estimated: bool = False
    missing_classes: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.net.spec.num_classes


def evaluate_top1(net: Network, dataset: LabeledDataset, batch_size: int = 256) -> float:
    """Fraction of eval-mode argmax predictions matching the labels."""
    hits = 0
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits = net.logits(net.normalize(imgs))
        hits += int((logits.argmax(axis=1) == labels).sum())
    return hits / max(len(dataset), 1)


def train_teacher(dataset: LabeledDataset, net_spec: NetworkSpec, config: TrainConfig,
                  eval_dataset: LabeledDataset | None = None) -> TeacherModel:
    """Standard supervised training; global BN stats fill in along the way."""
    net = Network.create(net_spec, seed=config.seed)
    net.norm_mean, net.norm_std = dataset.channel_stats()
    opt = AdamState()
    rng = derive_rng(config.seed, "teacher-train")
    steps_per_epoch = max(len(dataset) // config.batch_size, 1)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        for imgs, labels in iter_batches(dataset, config.batch_size, rng):
            batch = net.normalize(imgs)
            logits, _, _ = net.forward(batch, mode="train")
            loss = T.softmax_cross_entropy(logits, T.onehot(labels, net_spec.num_classes))
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"teacher training diverged at epoch {epoch} (loss={loss.item()})")
            net.params.zero_grad()
            loss.backward()
            adam_step(net.trainable(), opt, lr=cosine_lr(config.lr, step, total_steps),
                      weight_decay=config.weight_decay)
            step += 1
    acc = evaluate_top1(net, eval_dataset if eval_dataset is not None else dataset)
    return TeacherModel(net=net, top1_accuracy=acc)


def check_epoch_budget(dataset: LabeledDataset, batch_size: int, eps_mom: float,
                       T_prob: float = 0.05, delta: float = 0.2, C: float = 1.0,
                       tau: float = 0.05):
    """Compare one epoch's batch count against the stabilization bound; warn if short."""
    min_pc = dataset.min_class_prob
    if min_pc >= 1.0:
        return None  # single class: every batch contains it, bound is vacuous
    bound = required_updates(BoundInputs(
        T=T_prob, delta=delta, eps_mom=eps_mom, C=C, tau=tau,
        min_pc=min_pc, batch_size=batch_size))
    batches = len(dataset) // batch_size
    if batches < bound.n:
        warnings.warn(
            f"one epoch gives {batches} updates but the bound asks for {bound.n}; "
            f"class statistics may not stabilize", stacklevel=2)
    return bound


def _subset_moments(activation: np.ndarray, mask: np.ndarray):
    """Per-channel mean/var of a class subset; var is None for <2 elements."""
    sub = activation[mask]
    if sub.ndim == 4:
        elements = sub.shape[0] * sub.shape[2] * sub.shape[3]
        axes = (0, 2, 3)
    else:
        elements = sub.shape[0]
        axes = (0,)
    mu = sub.mean(axis=axes)
    var = sub.var(axis=axes) if elements >= 2 else None
    return mu, var


def estimate_class_stats(teacher: TeacherModel, dataset: LabeledDataset,
                         batch_size: int = 16, eps_mom: float = 0.1, epochs: int = 1,
                         seed: int = 0, record_updates: bool = False) -> TeacherModel:
    """One frozen-parameter pass that fills the per-class BN statistic tables.

    Forward runs in eval mode (global statistics), so neither parameters nor
    global running stats move. Class rows start as copies of the global rows.
    Returns the same TeacherModel; the update log is attached as
    ``teacher.update_log`` when requested.
    """
    net = teacher.net
    bn_ids = net.bn_layer_ids()
    for lid in bn_ids:
        st = net.bn_states[lid]
        st.eps_mom = eps_mom
        st.seed_classwise_from_global()
    check_epoch_budget(dataset, batch_size, eps_mom)
    rng = derive_rng(seed, "estimate-stats")
    log = [] if record_updates else None
    seen = np.zeros(dataset.num_classes, dtype=bool)
    with T.no_grad():
        for _ in range(epochs):
            for imgs, labels in iter_batches(dataset, batch_size, rng):
                batch = net.normalize(imgs)
                _, _, bn_inputs = net.forward(batch, mode="eval", collect_inputs=True)
                for c in np.unique(labels):
                    mask = labels == c
                    seen[c] = True
                    for lid in bn_ids:
                        mu, var = _subset_moments(bn_inputs[lid], mask)
                        update_running(net.bn_states[lid], int(c), mu, var)
                        if log is not None:
                            log.append((lid, int(c), mu, var))
    teacher.stats_estimated = True
    teacher.missing_classes = [int(c) for c in np.flatnonzero(~seen)]
    if teacher.missing_classes:
        warnings.warn(f"classes never seen during estimation: {teacher.missing_classes}; "
                      f"their rows keep the global copy", stacklevel=2)
    if record_updates:
        teacher.update_log = log
    return teacher


def class_stats_storage(teacher: TeacherModel) -> int:
    """Bytes needed to persist the class statistics tables (payload + header)."""
    channels = [teacher.net.bn_states[lid].channels for lid in teacher.net.bn_layer_ids()]
    return class_stats_file_bytes(channels, teacher.num_classes)


def save_teacher_stats(teacher: TeacherModel, path) -> int:
    states = [teacher.net.bn_states[lid] for lid in teacher.net.bn_layer_ids()]
    return save_class_stats(states, path)


def resnet18_bn_channel_sum() -> int:
    """BN channel total of the standard 18-layer residual classifier."""
    stem = [64]
    channels = []
    widths = [64, 128, 256, 512]
    for stage, width in enumerate(widths):
        for block in range(2):
            channels += [width, width]
            if stage > 0 and block == 0:
                channels.append(width)  # projection shortcut BN
    return sum(stem + channels)
