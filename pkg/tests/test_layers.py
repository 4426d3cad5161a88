"""Network assembly, spec validation, and checkpoint round-trips."""

import numpy as np
import pytest

from lpld.errors import LabelStoreError, ShapeError
from lpld.layers import (
    LayerSpec,
    Network,
    NetworkSpec,
    load_checkpoint,
    serialize_checkpoint,
    small_cnn_spec,
)


class TestNetworkSpec:
    def test_json_round_trip(self):
        spec = small_cnn_spec((3, 16, 16), 5, widths=(4, 8))
        again = NetworkSpec.from_json(spec.to_json())
        assert again.input_shape == spec.input_shape
        assert again.num_classes == spec.num_classes
        assert [l.type for l in again.layers] == [l.type for l in spec.layers]

    def test_requires_bn_layer(self):
        spec = NetworkSpec((4,), 2, [LayerSpec("dense", out_features=2)])
        with pytest.raises(ShapeError, match="bn"):
            spec.shapes()

    def test_incompatible_dimensions_name_layer(self):
        spec = NetworkSpec((3, 8, 8), 2, [
            LayerSpec("flatten"), LayerSpec("bn"),
            LayerSpec("pool", size=2),  # pool after flatten is invalid
            LayerSpec("dense", out_features=2)])
        with pytest.raises(ShapeError, match="layer2"):
            spec.shapes()

    def test_final_layer_must_match_classes(self):
        spec = NetworkSpec((4,), 3, [LayerSpec("bn"), LayerSpec("dense", out_features=2)])
        with pytest.raises(ShapeError, match="final layer"):
            spec.shapes()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a.weight": rng.standard_normal((3, 4, 2, 2)).astype(np.float32),
            "b.bias": rng.standard_normal(7).astype(np.float32),
            "scalarish": np.asarray([1.5], dtype=np.float32),
        }
        path = tmp_path / "t.ckpt"
        path.write_bytes(serialize_checkpoint(tensors))
        loaded = load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], tensors[name])

    def test_network_save_load_restores_everything(self, tmp_path):
        net = Network.create(small_cnn_spec((3, 8, 8), 4, widths=(4,)), seed=3)
        net.norm_mean = np.array([0.4, 0.5, 0.6], dtype=np.float32)
        net.norm_std = np.array([0.2, 0.25, 0.3], dtype=np.float32)
        for lid in net.bn_layer_ids():
            net.bn_states[lid].global_rm[:] = 0.1
            net.bn_states[lid].global_rv[:] = 2.0
        path = tmp_path / "net.ckpt"
        net.save(path, extra={"meta.top1": np.asarray([0.93], dtype=np.float32)})
        loaded, extras = Network.load(path)
        for name, t in net.params.items():
            np.testing.assert_array_equal(loaded.params[name].data, t.data)
        for lid in net.bn_layer_ids():
            np.testing.assert_array_equal(loaded.bn_states[lid].global_rm,
                                          net.bn_states[lid].global_rm)
        np.testing.assert_array_equal(loaded.norm_mean, net.norm_mean)
        assert extras["meta.top1"][0] == np.float32(0.93)
        # same inputs give identical logits
        x = np.random.default_rng(1).standard_normal((2, 3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(net.logits(x), loaded.logits(x))

    def test_truncated_checkpoint_rejected(self, tmp_path):
        net = Network.create(small_cnn_spec((3, 8, 8), 4, widths=(4,)), seed=3)
        path = tmp_path / "net.ckpt"
        blob = net.save(path)
        (tmp_path / "cut.ckpt").write_bytes(blob[:len(blob) // 2])
        with pytest.raises(LabelStoreError):
            Network.load(tmp_path / "cut.ckpt")

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(LabelStoreError, match="not a checkpoint"):
            load_checkpoint(path)


class TestForwardModes:
    def test_train_mode_updates_global_stats_only(self):
        net = Network.create(small_cnn_spec((3, 8, 8), 4, widths=(4,)), seed=0)
        lid = net.bn_layer_ids()[0]
        class_before = net.bn_states[lid].classwise_rm.copy()
        global_before = net.bn_states[lid].global_rm.copy()
        x = np.random.default_rng(2).standard_normal((8, 3, 8, 8)).astype(np.float32)
        net.forward(x, mode="train")
        assert not np.array_equal(net.bn_states[lid].global_rm, global_before)
        np.testing.assert_array_equal(net.bn_states[lid].classwise_rm, class_before)

    def test_eval_mode_touches_nothing(self):
        net = Network.create(small_cnn_spec((3, 8, 8), 4, widths=(4,)), seed=0)
        lid = net.bn_layer_ids()[0]
        before = net.bn_states[lid].global_rm.copy()
        x = np.random.default_rng(2).standard_normal((8, 3, 8, 8)).astype(np.float32)
        net.forward(x, mode="eval")
        np.testing.assert_array_equal(net.bn_states[lid].global_rm, before)

    def test_bn_activations_reported_for_every_bn_layer(self):
        net = Network.create(small_cnn_spec((3, 16, 16), 4, widths=(4, 8)), seed=0)
        x = np.random.default_rng(3).standard_normal((4, 3, 16, 16)).astype(np.float32)
        _, acts, _ = net.forward(x, mode="eval", collect_bn=True)
        assert [a.layer_id for a in acts] == net.bn_layer_ids()
        for a in acts:
            assert a.mean.data.ndim == 1 and a.var.data.ndim == 1

    def test_classwise_forward_uses_selected_rows(self):
        net = Network.create(small_cnn_spec((3, 8, 8), 4, widths=(4,)), seed=0)
        lid = net.bn_layer_ids()[0]
        rng = np.random.default_rng(4)
        net.bn_states[lid].classwise_rm[:] = rng.standard_normal((4, 4))
        net.bn_states[lid].classwise_rv[:] = 0.5 + rng.random((4, 4))
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        out_a, _, _ = net.forward(x, mode="eval", stats="classwise", class_id=0)
        out_b, _, _ = net.forward(x, mode="eval", stats="classwise", class_id=1)
        assert not np.array_equal(out_a.data, out_b.data)
