"""Teacher training and class-statistics estimation against brute-force oracles."""

import warnings

import numpy as np
import pytest

from lpld import tensor as T
from lpld.bn import BoundInputs, class_stats_file_bytes, required_updates
from lpld.data import LabeledDataset, iter_batches, make_toy_dataset
from lpld.layers import small_cnn_spec
from lpld.squeeze import (
    TrainConfig,
    class_stats_storage,
    estimate_class_stats,
    evaluate_top1,
    resnet18_bn_channel_sum,
    train_teacher,
)
from lpld.util import derive_rng


def separable_two_class(n_per_class=60, seed=0) -> LabeledDataset:
    """Two classes split by a large constant offset; trivially separable."""
    rng = derive_rng(seed, "separable")
    a = 0.25 + 0.05 * rng.standard_normal((n_per_class, 3, 8, 8))
    b = 0.75 + 0.05 * rng.standard_normal((n_per_class, 3, 8, 8))
    images = np.clip(np.concatenate([a, b]), 0, 1).astype(np.float32)
    labels = np.array([0] * n_per_class + [1] * n_per_class)
    return LabeledDataset(images, labels, 2)


class TestTrainTeacher:
    def test_separable_two_class_reaches_high_accuracy(self):
        ds = separable_two_class()
        spec = small_cnn_spec((3, 8, 8), 2, widths=(4,))
        teacher = train_teacher(ds, spec, TrainConfig(epochs=20, batch_size=16, seed=0))
        assert teacher.top1_accuracy >= 0.99

    def test_zero_epochs_gives_chance_accuracy(self):
        # chance level is only meaningful against label-randomized data: a fixed
        # untrained classifier can be anti-correlated with structured labels
        ds = separable_two_class(n_per_class=100)
        rng = derive_rng(0, "label-shuffle")
        shuffled = LabeledDataset(ds.images, rng.permutation(ds.labels), 2)
        spec = small_cnn_spec((3, 8, 8), 2, widths=(4,))
        teacher = train_teacher(shuffled, spec, TrainConfig(epochs=0, seed=0))
        assert abs(teacher.top1_accuracy - 0.5) < 0.15

    def test_fixed_seed_reproduces_parameters(self):
        ds = separable_two_class(n_per_class=30)
        spec = small_cnn_spec((3, 8, 8), 2, widths=(4,))
        runs = [train_teacher(ds, spec, TrainConfig(epochs=2, batch_size=16, seed=7))
                for _ in range(2)]
        for name, t in runs[0].net.params.items():
            np.testing.assert_array_equal(t.data, runs[1].net.params[name].data)


@pytest.fixture(scope="module")
def four_class():
    # 3200 images so a one-epoch pass at batch 16 exceeds the update bound
    ds = make_toy_dataset(num_classes=4, per_class=800, image_size=16,
                          channels=3, noise=0.3, seed=2)
    spec = small_cnn_spec((3, 16, 16), 4, widths=(6, 12))
    teacher = train_teacher(ds, spec, TrainConfig(epochs=3, batch_size=32, seed=1))
    return teacher, ds


class TestEstimateClassStats:

    def test_parameters_and_global_stats_untouched(self, four_class):
        teacher, ds = four_class
        params_before = {k: v.data.copy() for k, v in teacher.net.params.items()}
        globals_before = {lid: (st.global_rm.copy(), st.global_rv.copy())
                          for lid, st in teacher.net.bn_states.items()}
        estimate_class_stats(teacher, ds, batch_size=32, seed=4)
        for name, arr in params_before.items():
            np.testing.assert_array_equal(teacher.net.params[name].data, arr)
        for lid, (rm, rv) in globals_before.items():
            np.testing.assert_array_equal(teacher.net.bn_states[lid].global_rm, rm)
            np.testing.assert_array_equal(teacher.net.bn_states[lid].global_rv, rv)

    def test_update_stream_matches_ema_replay_oracle_bit_exactly(self, four_class):
        teacher, ds = four_class
        eps = 0.1
        estimate_class_stats(teacher, ds, batch_size=32, eps_mom=eps, seed=9,
                             record_updates=True)
        # replay the recorded (layer, class, mu, var) stream independently
        replay = {lid: (st.global_rm[None].repeat(4, 0).copy(),
                        st.global_rv[None].repeat(4, 0).copy())
                  for lid, st in teacher.net.bn_states.items()}
        one = np.float32(1.0 - eps)
        w = np.float32(eps)
        for lid, c, mu, var in teacher.update_log:
            rm, rv = replay[lid]
            rm[c] = one * rm[c] + w * mu
            if var is not None:
                rv[c] = one * rv[c] + w * var
        for lid, st in teacher.net.bn_states.items():
            np.testing.assert_array_equal(st.classwise_rm, replay[lid][0])
            np.testing.assert_array_equal(st.classwise_rv, replay[lid][1])

    def test_class_means_approach_brute_force_oracle(self, four_class):
        teacher, ds = four_class
        batch_size, tau = 16, 0.05
        bound = required_updates(BoundInputs(
            T=0.05, delta=0.2, eps_mom=0.1, C=1.0, tau=tau,
            min_pc=ds.min_class_prob, batch_size=batch_size))
        assert len(ds) // batch_size >= bound.n, "one epoch must cover the bound"
        estimate_class_stats(teacher, ds, batch_size=batch_size, seed=3)
        # brute force: exact class means of BN inputs over the full dataset
        net = teacher.net
        with T.no_grad():
            _, _, bn_inputs = net.forward(net.normalize(ds.images), mode="eval",
                                          collect_inputs=True)
        total = 0
        within = 0
        for lid in net.bn_layer_ids():
            act = bn_inputs[lid]
            for c in range(ds.num_classes):
                exact = act[ds.labels == c].mean(axis=(0, 2, 3))
                est = net.bn_states[lid].classwise_rm[c]
                within += int((np.abs(est - exact) <= tau).sum())
                total += exact.shape[0]
        assert within / total >= 0.95

    def test_single_class_matches_global_ema_of_same_pass(self):
        ds = make_toy_dataset(num_classes=1, per_class=200, image_size=16,
                              channels=3, noise=0.3, seed=5)
        spec = small_cnn_spec((3, 16, 16), 1, widths=(6,))
        # a 1-class classifier is degenerate to train; init suffices here
        from lpld.layers import Network
        from lpld.squeeze import TeacherModel
        net = Network.create(spec, seed=0)
        net.norm_mean, net.norm_std = ds.channel_stats()
        teacher = TeacherModel(net=net)
        estimate_class_stats(teacher, ds, batch_size=16, eps_mom=0.1, seed=8,
                             record_updates=True)
        # replaying the same batch moments into a separate "global" EMA row
        replica = {lid: net.bn_states[lid].global_rm.copy() for lid in net.bn_layer_ids()}
        for lid, c, mu, var in teacher.update_log:
            replica[lid] = np.float32(0.9) * replica[lid] + np.float32(0.1) * mu
        for lid in net.bn_layer_ids():
            np.testing.assert_allclose(net.bn_states[lid].classwise_rm[0],
                                       replica[lid], atol=1e-5)

    def test_absent_class_keeps_global_copy_and_warns(self):
        ds = make_toy_dataset(num_classes=3, per_class=40, image_size=16,
                              channels=3, noise=0.3, seed=6)
        # drop class 2 entirely
        keep = ds.labels != 2
        trimmed = LabeledDataset(ds.images[keep], ds.labels[keep], 3)
        spec = small_cnn_spec((3, 16, 16), 3, widths=(4,))
        teacher = train_teacher(trimmed, spec, TrainConfig(epochs=1, batch_size=16, seed=0))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            estimate_class_stats(teacher, trimmed, batch_size=8, seed=1)
        assert teacher.missing_classes == [2]
        assert any("never seen" in str(w.message) for w in caught)
        lid = teacher.net.bn_layer_ids()[0]
        st = teacher.net.bn_states[lid]
        np.testing.assert_array_equal(st.classwise_rm[2], st.global_rm)

    def test_batch_appearance_fractions_match_q(self, four_class):
        teacher, ds = four_class
        batch_size = 16
        estimate_class_stats(teacher, ds, batch_size=batch_size, seed=14,
                             record_updates=True)
        n_layers = len(teacher.net.bn_layer_ids())
        n_batches = len(ds) // batch_size
        counts = np.zeros(ds.num_classes)
        for lid, c, mu, var in teacher.update_log:
            counts[c] += 1
        counts /= n_layers  # one update per (layer, class-present) pair
        probs = ds.class_counts / len(ds)
        q = 1 - (1 - probs) ** batch_size
        # chi-square-style sanity: each class within 4 sigma of its binomial mean
        for c in range(ds.num_classes):
            sigma = np.sqrt(n_batches * q[c] * (1 - q[c])) + 1e-9
            assert abs(counts[c] - n_batches * q[c]) <= 4 * sigma + 1


class TestStorage:
    def test_zero_classes_header_only(self):
        assert class_stats_file_bytes([], 0) == 16

    def test_toy_channel_arithmetic(self):
        # the class-scaling payload is 2 * 10 classes * (8+16) channels * 4 bytes;
        # everything else (magic, counts, global rows) does not scale with classes
        payload = class_stats_file_bytes([8, 16], 10) - class_stats_file_bytes([8, 16], 0)
        assert payload == 1920

    def test_teacher_storage_uses_its_bn_layers(self, tiny_teacher):
        teacher = tiny_teacher["teacher"]
        channels = [teacher.net.bn_states[lid].channels for lid in teacher.net.bn_layer_ids()]
        expected = class_stats_file_bytes(channels, teacher.num_classes)
        assert class_stats_storage(teacher) == expected

    def test_resnet18_projection_near_reported_delta(self):
        channel_sum = resnet18_bn_channel_sum()
        assert channel_sum == 4800
        payload_mb = 2 * 1000 * channel_sum * 4 / 1024 ** 2
        assert abs(payload_mb - 36.64) / 36.64 < 0.10


class TestEvaluate:
    def test_teacher_on_own_train_set(self):
        ds = separable_two_class(n_per_class=100)
        spec = small_cnn_spec((3, 8, 8), 2, widths=(4,))
        teacher = train_teacher(ds, spec, TrainConfig(epochs=10, batch_size=16, seed=2))
        assert evaluate_top1(teacher.net, ds) >= 0.95
