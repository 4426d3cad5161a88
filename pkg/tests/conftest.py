"""Shared fixtures: small networks, toy datasets, and the session pipeline."""

import warnings

import numpy as np
import pytest

from lpld.data import make_toy_splits
from lpld.layers import Network, small_cnn_spec
from lpld.recover import RecoverConfig, synthesize
from lpld.relabel import AugConfig, generate_labels
from lpld.squeeze import TrainConfig, estimate_class_stats, train_teacher

warnings.filterwarnings("ignore", message="one epoch gives")


def numeric_gradient(fn, tensor, h=1e-5):
    """Central finite differences of a scalar fn with respect to tensor.data."""
    grad = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        old = tensor.data[i]
        tensor.data[i] = old + h
        fp = fn()
        tensor.data[i] = old - h
        fm = fn()
        tensor.data[i] = old
        grad[i] = (fp - fm) / (2 * h)
        it.iternext()
    return grad


def max_rel_error(analytic, numeric, atol=1e-7):
    """Worst relative deviation; deviations below atol count as zero.

    The absolute floor covers parameters whose true gradient is identically
    zero (e.g. a conv bias feeding train-mode BN), where finite differences
    return pure noise.
    """
    diff = np.abs(analytic - numeric)
    diff = np.where(diff < atol, 0.0, diff)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return diff.max() / scale


@pytest.fixture(scope="session")
def tiny_teacher():
    """4-class 16x16 teacher with estimated class stats; fast shared model."""
    train, test = make_toy_splits(num_classes=4, per_class=80, test_per_class=40,
                                  image_size=16, noise=0.35, seed=11)
    spec = small_cnn_spec((3, 16, 16), 4, widths=(6, 12))
    teacher = train_teacher(train, spec, TrainConfig(epochs=4, batch_size=16, seed=5),
                            eval_dataset=test)
    estimate_class_stats(teacher, train, batch_size=8, seed=5)
    return {"teacher": teacher, "train": train, "test": test, "spec": spec}


@pytest.fixture(scope="session")
def tiny_condensed(tiny_teacher):
    """Small lpld-mode condensed set plus a 6-epoch label store."""
    teacher = tiny_teacher["teacher"]
    condensed = synthesize(teacher, ipc=4, config=RecoverConfig(iterations=40, seed=21),
                           mode="lpld")
    store = generate_labels(teacher, condensed, epochs=6, batch_size=8,
                            aug_config=AugConfig(), seed=13)
    return {"condensed": condensed, "store": store, **tiny_teacher}
