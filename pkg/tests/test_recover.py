"""Synthesis objective, class independence, and lossless export round-trips."""

import json

import numpy as np
import pytest

from lpld import tensor as T
from lpld.errors import ConfigError
from lpld.recover import (
    CondensedDataset,
    RecoverConfig,
    bn_match_loss,
    export_images,
    load_condensed,
    synthesize,
    teacher_checksum,
)


class TestBNMatchLoss:
    def test_exact_match_gives_zero(self):
        stats = [(np.array([1.0, 2.0]), np.array([0.5, 0.5]))]
        targets = [(np.array([1.0, 2.0]), np.array([0.5, 0.5]))]
        assert bn_match_loss(stats, targets).item() == 0.0

    def test_single_channel_unit_gap(self):
        stats = [(np.array([1.0]), np.array([1.0]))]
        targets = [(np.array([0.0]), np.array([1.0]))]
        assert bn_match_loss(stats, targets).item() == pytest.approx(1.0)

    def test_three_layer_fixture_matches_scalar_oracle(self):
        rng = np.random.default_rng(17)
        stats, targets = [], []
        expected = 0.0
        for channels in (3, 5, 2):
            mu = rng.standard_normal(channels)
            var = rng.random(channels)
            rm = rng.standard_normal(channels)
            rv = rng.random(channels)
            stats.append((mu, var))
            targets.append((rm, rv))
            expected += np.sqrt(((mu - rm) ** 2).sum()) + np.sqrt(((var - rv) ** 2).sum())
        assert bn_match_loss(stats, targets).item() == pytest.approx(expected, rel=1e-5)

    def test_layer_count_mismatch(self):
        with pytest.raises(ConfigError):
            bn_match_loss([(np.zeros(2), np.zeros(2))], [])


class TestSynthesize:
    def test_lpld_without_stats_is_rejected(self, tiny_teacher):
        from lpld.squeeze import TeacherModel
        bare = TeacherModel(net=tiny_teacher["teacher"].net, stats_estimated=False)
        with pytest.raises(ConfigError, match="class statistics"):
            synthesize(bare, ipc=2, config=RecoverConfig(iterations=1), mode="lpld")

    def test_alpha_zero_reduces_teacher_ce(self, tiny_teacher):
        teacher = tiny_teacher["teacher"]
        cfg = RecoverConfig(iterations=30, alpha=0.0, seed=3)
        ds = synthesize(teacher, ipc=3, config=cfg, mode="baseline")
        for curve in ds.loss_history.values():
            assert curve[-1] < curve[0]

    def test_lpld_bn_loss_strictly_decreases_per_class(self, tiny_teacher):
        teacher = tiny_teacher["teacher"]
        cfg = RecoverConfig(iterations=40, seed=5)
        ds = synthesize(teacher, ipc=4, config=cfg, mode="lpld")
        net = teacher.net
        for c in range(teacher.num_classes):
            batch = net.normalize(ds.images[ds.class_slice(c)])
            with T.no_grad():
                _, acts, _ = net.forward(batch, mode="eval", collect_bn=True)
            stats = [(a.mean.data, a.var.data) for a in acts]
            targets = [(net.bn_states[lid].classwise_rm[c], net.bn_states[lid].classwise_rv[c])
                       for lid in net.bn_layer_ids()]
            final = bn_match_loss(stats, targets).item()
            # initialization loss from an un-optimized batch with the same seed
            from lpld.util import derive_rng
            rng = derive_rng(cfg.seed, "recover", "lpld", c)
            raw = rng.uniform(0, 1, size=batch.shape).astype(np.float32)
            init = net.normalize(raw)
            with T.no_grad():
                _, acts0, _ = net.forward(init, mode="eval", collect_bn=True)
            stats0 = [(a.mean.data, a.var.data) for a in acts0]
            assert final < bn_match_loss(stats0, targets).item()

    def test_class_independence_bit_identical(self, tiny_teacher):
        teacher = tiny_teacher["teacher"]
        cfg = RecoverConfig(iterations=8, seed=9)
        serial = synthesize(teacher, ipc=2, config=cfg, mode="lpld")
        threaded = synthesize(teacher, ipc=2,
                              config=RecoverConfig(iterations=8, seed=9, threads=3),
                              mode="lpld")
        np.testing.assert_array_equal(serial.images, threaded.images)

    def test_loss_windows_mostly_non_increasing(self, tiny_teacher):
        teacher = tiny_teacher["teacher"]
        ds = synthesize(teacher, ipc=3, config=RecoverConfig(iterations=120, seed=2),
                        mode="lpld")
        window = 50
        good = total = 0
        for curve in ds.loss_history.values():
            for i in range(len(curve) - window):
                total += 1
                good += int(curve[i + window] <= curve[i])
        assert good / total >= 0.9

    def test_ce_forward_uses_global_stats(self, tiny_teacher):
        # both modes keep BN in eval-global during synthesis; the class-pure
        # batch optimized under class targets must still score finite CE with
        # global statistics (structural check: logits computed in global mode)
        teacher = tiny_teacher["teacher"]
        ds = synthesize(teacher, ipc=2, config=RecoverConfig(iterations=5, seed=1), mode="lpld")
        net = teacher.net
        logits = net.logits(net.normalize(ds.images))
        assert np.isfinite(logits).all()


class TestExport:
    @pytest.fixture(scope="class")
    def exported(self, tmp_path_factory, tiny_condensed):
        out = tmp_path_factory.mktemp("condensed")
        manifest = export_images(tiny_condensed["condensed"], out)
        return out, manifest, tiny_condensed["condensed"]

    def test_manifest_counts_samples(self, exported):
        out, manifest, ds = exported
        assert len(manifest["samples"]) == ds.num_classes * ds.ipc

    def test_round_trip_bit_exact(self, exported):
        out, _, ds = exported
        loaded = load_condensed(out)
        np.testing.assert_array_equal(loaded.images, ds.images)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        assert loaded.teacher_checksum == ds.teacher_checksum

    def test_pixel_flip_detected_by_checksum(self, tmp_path, tiny_condensed):
        ds = tiny_condensed["condensed"]
        export_images(ds, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        victim = tmp_path / manifest["samples"][0]["file"]
        blob = bytearray(victim.read_bytes())
        blob[-20] ^= 0x01  # flip one bit inside the compressed payload
        victim.write_bytes(bytes(blob))
        with pytest.raises(Exception):
            load_condensed(tmp_path)

    def test_checksum_tracks_teacher_identity(self, tiny_teacher):
        teacher = tiny_teacher["teacher"]
        first = teacher_checksum(teacher)
        lid = teacher.net.bn_layer_ids()[0]
        teacher.net.bn_states[lid].classwise_rm[0, 0] += 1.0
        try:
            assert teacher_checksum(teacher) != first
        finally:
            teacher.net.bn_states[lid].classwise_rm[0, 0] -= 1.0
        assert teacher_checksum(teacher) == first
