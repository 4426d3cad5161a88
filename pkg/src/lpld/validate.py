"""Validate phase: train a student from replayed augmentations and stored labels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lpld import tensor as T
from lpld.data import LabeledDataset
from lpld.errors import ChecksumError, ConfigError, NonFiniteError
from lpld.labelpool import LabelPool, sample_training_stream
from lpld.layers import Network, NetworkSpec
from lpld.optim import AdamState, adam_step, cosine_lr
from lpld.recover import CondensedDataset
from lpld.relabel import apply_augmentation, mixed_targets
from lpld.util import derive_rng


@dataclass
class StudentConfig:
    epochs: int = 30
    lr: float = 2e-3
    loss: str = "kl"       # "kl" | "mse_gt"
    gamma: float = 0.1     # ground-truth CE weight for mse_gt
    seed: int = 0
    batches_per_epoch: int = 0  # 0: use the store's batches per epoch
    weight_decay: float = 0.0
    eval_every_epoch: bool = False  # per-epoch test accuracy is costly; final is free


@dataclass
class TrainRun:
    net: Network
    config: StudentConfig
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    final_accuracy: float = 0.0


def kd_loss(student_logits, soft_labels, hard_targets=None, kind: str = "kl",
            gamma: float = 0.1):
    """Distillation loss against stored teacher logits.

    kl: KL(softmax(teacher) || softmax(student)).
    mse_gt: MSE(student_logits, teacher_logits) + gamma * CE(student_logits, targets).
    """
    if kind == "kl":
        probs = T.softmax(np.asarray(soft_labels, dtype=np.float32))
        return T.kl_div_with_logits(student_logits, probs)
    if kind == "mse_gt":
        loss = T.mse(student_logits, np.asarray(soft_labels, dtype=np.float32))
        if gamma and hard_targets is not None:
            loss = loss + gamma * T.softmax_cross_entropy(student_logits, hard_targets)
        return loss
    raise ConfigError(f"unknown kd loss {kind!r}")


def train_student(condensed: CondensedDataset, pool: LabelPool, student_spec: NetworkSpec,
                  config: StudentConfig, norm_mean=None, norm_std=None,
                  test_set: LabeledDataset | None = None) -> TrainRun:
    """Replay pooled records against the condensed images and fit the student.

    The pool's store must have been generated for this condensed dataset's
    teacher; a checksum mismatch refuses to train.
    """
    header = pool.store.header
    if condensed.teacher_checksum and header.teacher_checksum != bytes.fromhex(condensed.teacher_checksum):
        raise ChecksumError("labels were generated for a different teacher/dataset")
    if header.num_classes != condensed.num_classes or header.ipc != condensed.ipc:
        raise ChecksumError("label store geometry does not match the condensed dataset")
    net = Network.create(student_spec, seed=config.seed)
    if norm_mean is not None:
        net.norm_mean = np.asarray(norm_mean, dtype=np.float32)
        net.norm_std = np.asarray(norm_std, dtype=np.float32)
    bpe = config.batches_per_epoch or header.batches_per_epoch
    stream = sample_training_stream(pool, config.epochs, bpe, seed=config.seed)
    opt = AdamState()
    run = TrainRun(net=net, config=config)
    total_steps = max(config.epochs * bpe, 1)
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for rid in stream[epoch * bpe:(epoch + 1) * bpe]:
            rec = pool.store.records[int(rid)]
            images = condensed.images[rec.image_indices.astype(np.int64)]
            batch = apply_augmentation(rec.aug, images)
            logits, _, _ = net.forward(net.normalize(batch), mode="train")
            hard = None
            if config.loss == "mse_gt":
                labels = condensed.labels[rec.image_indices.astype(np.int64)]
                hard = mixed_targets(rec.aug, labels, header.num_classes)
            loss = kd_loss(logits, rec.logits, hard, kind=config.loss, gamma=config.gamma)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"student loss non-finite at epoch {epoch}")
            losses.append(value)
            net.params.zero_grad()
            loss.backward()
            adam_step(net.trainable(), opt, lr=cosine_lr(config.lr, step, total_steps),
                      weight_decay=config.weight_decay)
            step += 1
        run.epoch_loss.append(float(np.mean(losses)))
        if test_set is not None and config.eval_every_epoch:
            run.epoch_accuracy.append(evaluate(net, test_set))
    run.final_accuracy = evaluate(net, test_set) if test_set is not None else 0.0
    return run


def evaluate(net: Network, dataset: LabeledDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy on a labeled set (eval mode, global statistics)."""
    hits = 0
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits = net.logits(net.normalize(imgs))
        hits += int((logits.argmax(axis=1) == labels).sum())
    return hits / max(len(dataset), 1)
