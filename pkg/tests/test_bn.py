"""Class-wise BN state, EMA updates, and the update-count bound calculator."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpld import tensor as T
from lpld.bn import (
    GLOBAL,
    BNLayerState,
    BoundInputs,
    bn_apply,
    class_appearance_prob,
    load_class_stats,
    monte_carlo_convergence,
    required_updates,
    save_class_stats,
    update_running,
)
from lpld.errors import ShapeError


class TestBNApply:
    def test_eval_identity_stats(self):
        state = BNLayerState.create(2, num_classes=3)
        x = np.random.default_rng(0).standard_normal((5, 2, 3, 3)).astype(np.float32)
        y = bn_apply(state, T.Tensor(x), mode="eval")
        np.testing.assert_allclose(y.data, x / np.sqrt(1 + state.eps_div), rtol=1e-6)

    def test_train_two_sample_hand_arithmetic(self):
        # inputs {1, 3}: batch mean 2, population variance 1
        state = BNLayerState.create(1, num_classes=2)
        x = np.array([[1.0], [3.0]], dtype=np.float32)
        y, mu, var = bn_apply(state, T.Tensor(x), mode="train")
        np.testing.assert_allclose(mu, [2.0])
        np.testing.assert_allclose(var, [1.0])
        expected = np.array([[-1.0], [1.0]]) / np.sqrt(1.0 + state.eps_div)
        np.testing.assert_allclose(y.data, expected, rtol=1e-6)

    def test_classwise_eval_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        state = BNLayerState.create(4, num_classes=5)
        state.classwise_rm[:] = rng.standard_normal((5, 4))
        state.classwise_rv[:] = 0.5 + rng.random((5, 4))
        state.gamma[:] = rng.standard_normal(4)
        state.beta[:] = rng.standard_normal(4)
        x = rng.standard_normal((3, 4)).astype(np.float32)
        y = bn_apply(state, T.Tensor(x), mode="eval", class_id=2)
        expected = np.zeros_like(x)
        for n in range(3):
            for c in range(4):
                xhat = (x[n, c] - state.classwise_rm[2, c]) / math.sqrt(
                    state.classwise_rv[2, c] + state.eps_div)
                expected[n, c] = state.gamma[c] * xhat + state.beta[c]
        np.testing.assert_allclose(y.data, expected, rtol=1e-5)

    def test_class_id_out_of_range(self):
        state = BNLayerState.create(2, num_classes=3)
        with pytest.raises(ShapeError, match="out of range"):
            bn_apply(state, T.Tensor(np.zeros((1, 2))), mode="eval", class_id=3)

    def test_eval_output_affine_in_input(self):
        # f(a*x1 + b*x2) == a*f0(x1) + b*f0(x2) + const structure per channel
        state = BNLayerState.create(3, num_classes=2)
        rng = np.random.default_rng(7)
        state.global_rm[:] = rng.standard_normal(3)
        state.global_rv[:] = 0.5 + rng.random(3)
        x1 = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        x2 = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        f = lambda x: bn_apply(state, T.Tensor(x), mode="eval").data
        lhs = f(0.3 * x1 + 0.7 * x2)
        rhs = 0.3 * f(x1) + 0.7 * f(x2)  # affine: weights sum to 1
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)


class TestUpdateRunning:
    def test_single_ema_step(self):
        state = BNLayerState.create(1, num_classes=2, eps_mom=0.1)
        state.global_rm[:] = 0.0
        update_running(state, GLOBAL, np.array([1.0]), np.array([1.0]))
        np.testing.assert_allclose(state.global_rm, [0.1], rtol=1e-6)

    def test_geometric_decay_closed_form(self):
        eps = 0.1
        state = BNLayerState.create(1, num_classes=1, eps_mom=eps)
        target = np.array([2.5], dtype=np.float32)
        state.classwise_rm[0] = 0.0
        n = 40
        for _ in range(n):
            update_running(state, 0, target, np.array([1.0]))
        expected_dev = (1 - eps) ** n * abs(0.0 - 2.5)
        np.testing.assert_allclose(abs(state.classwise_rm[0, 0] - 2.5), expected_dev, rtol=1e-4)

    def test_streaming_updates_match_replay_oracle_bit_exactly(self):
        rng = np.random.default_rng(12)
        channels, num_classes, eps = 6, 4, 0.1
        state = BNLayerState.create(channels, num_classes, eps_mom=eps)
        oracle_rm = state.classwise_rm.copy()
        oracle_rv = state.classwise_rv.copy()
        stream = []
        for _ in range(200):
            c = int(rng.integers(0, num_classes))
            mu = rng.standard_normal(channels).astype(np.float32)
            var = rng.random(channels).astype(np.float32)
            stream.append((c, mu, var))
            update_running(state, c, mu, var)
        one = np.float32(1.0 - eps)
        w = np.float32(eps)
        for c, mu, var in stream:
            oracle_rm[c] = one * oracle_rm[c] + w * mu
            oracle_rv[c] = one * oracle_rv[c] + w * var
        np.testing.assert_array_equal(state.classwise_rm, oracle_rm)
        np.testing.assert_array_equal(state.classwise_rv, oracle_rv)

    def test_global_and_classwise_rows_isolated(self):
        state = BNLayerState.create(2, num_classes=3)
        before_class = state.classwise_rm.copy()
        update_running(state, GLOBAL, np.array([1.0, 2.0]), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(state.classwise_rm, before_class)
        before_global = state.global_rm.copy()
        update_running(state, 1, np.array([5.0, 5.0]), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(state.global_rm, before_global)
        assert state.classwise_rm[0, 0] == before_class[0, 0]  # other rows untouched

    def test_variance_update_skippable(self):
        state = BNLayerState.create(1, num_classes=1)
        rv_before = state.classwise_rv.copy()
        update_running(state, 0, np.array([1.0]), batch_var=None)
        np.testing.assert_array_equal(state.classwise_rv, rv_before)
        assert state.classwise_rm[0, 0] != 0.0

    @given(eps=st.floats(0.01, 0.9), n=st.integers(1, 60),
           start=st.floats(-3, 3), target=st.floats(-3, 3))
    @settings(max_examples=40, deadline=None)
    def test_ema_deviation_decay_property(self, eps, n, start, target):
        # after n constant-target updates, deviation = (1-eps)^n * initial (float64)
        rm = np.array([start], dtype=np.float64)
        for _ in range(n):
            rm = (1 - eps) * rm + eps * target
        expected = (1 - eps) ** n * abs(start - target)
        assert abs(abs(rm[0] - target) - expected) < 1e-9 * max(1.0, expected)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        states = []
        for channels in (3, 7):
            st_ = BNLayerState.create(channels, num_classes=4)
            st_.global_rm[:] = rng.standard_normal(channels)
            st_.global_rv[:] = rng.random(channels)
            st_.classwise_rm[:] = rng.standard_normal((4, channels))
            st_.classwise_rv[:] = rng.random((4, channels))
            states.append(st_)
        path = tmp_path / "stats.bin"
        save_class_stats(states, path)
        layers = load_class_stats(path)
        for st_, rec in zip(states, layers):
            np.testing.assert_array_equal(st_.global_rm, rec["global_rm"])
            np.testing.assert_array_equal(st_.classwise_rm, rec["classwise_rm"])
            np.testing.assert_array_equal(st_.classwise_rv, rec["classwise_rv"])
        # second write is byte-identical
        path2 = tmp_path / "stats2.bin"
        save_class_stats(states, path2)
        assert path.read_bytes() == path2.read_bytes()


class TestAppearanceProbability:
    def test_imagenet_rarest_class_value(self):
        # rarest class of the 1.28M-image corpus at batch 256
        q = class_appearance_prob(732 / 1281167, 256)
        assert abs(q - 0.1361) < 1e-3

    def test_single_image_batch(self):
        assert class_appearance_prob(0.37, 1) == pytest.approx(0.37)

    def test_half_probability_two_samples(self):
        assert class_appearance_prob(0.5, 2) == pytest.approx(0.75)


class TestRequiredUpdates:
    APPENDIX_INPUTS = BoundInputs(T=0.05, delta=0.2, eps_mom=0.1, C=1.0, tau=0.01,
                                  min_pc=732 / 1281167, batch_size=256)

    def test_reference_values(self):
        result = required_updates(self.APPENDIX_INPUTS)
        assert abs(result.n_chernoff - 1355.2) < 0.5
        assert abs(result.n_convergence - 423.08) < 0.5
        assert result.n == 1356

    def test_chernoff_decreases_with_delta(self):
        loose = BoundInputs(T=0.05, delta=0.5, eps_mom=0.1, C=1.0, tau=0.01,
                            min_pc=732 / 1281167, batch_size=256)
        assert required_updates(loose).n_chernoff < required_updates(self.APPENDIX_INPUTS).n_chernoff

    def test_doubling_batch_size_decreases_both_terms(self):
        bigger = BoundInputs(T=0.05, delta=0.2, eps_mom=0.1, C=1.0, tau=0.01,
                             min_pc=732 / 1281167, batch_size=512)
        base = required_updates(self.APPENDIX_INPUTS)
        res = required_updates(bigger)
        assert res.n_chernoff < base.n_chernoff
        assert res.n_convergence < base.n_convergence

    def test_minimal_integer_property(self):
        result = required_updates(self.APPENDIX_INPUTS)
        n = result.n
        assert n >= result.n_chernoff and n >= result.n_convergence
        assert (n - 1) < max(result.n_chernoff, result.n_convergence)

    def test_tau_above_c_warns_and_uses_chernoff(self):
        inputs = BoundInputs(T=0.05, delta=0.2, eps_mom=0.1, C=0.5, tau=0.6,
                             min_pc=0.1, batch_size=8)
        result = required_updates(inputs)
        assert result.warning is not None
        assert result.n == math.ceil(result.n_chernoff)

    def test_invalid_inputs_rejected(self):
        with pytest.raises(ValueError):
            BoundInputs(T=1.5, delta=0.2, eps_mom=0.1, C=1, tau=0.1, min_pc=0.1, batch_size=8)
        with pytest.raises(ValueError):
            BoundInputs(T=0.05, delta=0.2, eps_mom=0.1, C=-1, tau=0.1, min_pc=0.1, batch_size=8)


class TestMonteCarlo:
    def test_zero_updates_never_converges(self):
        probs = np.full(5, 0.2)
        assert monte_carlo_convergence(5, probs, 8, 0.1, C=1.0, tau=0.01, n=0, trials=50) == 0.0

    def test_bound_is_sufficient_for_ten_classes(self):
        probs = np.full(10, 0.1)
        inputs = BoundInputs(T=0.05, delta=0.2, eps_mom=0.1, C=1.0, tau=0.01,
                             min_pc=0.1, batch_size=32)
        n = required_updates(inputs).n
        success = monte_carlo_convergence(10, probs, 32, 0.1, 1.0, 0.01, n,
                                          trials=500, seed=99)
        assert success >= 0.95

    def test_single_class_threshold_matches_geometric_decay(self):
        # with p=1 the class appears every batch; success flips exactly at
        # ceil(ln(C/tau) / -ln(1-eps))
        eps, C, tau = 0.1, 1.0, 0.01
        need = math.ceil(math.log(C / tau) / -math.log1p(-eps))
        probs = np.array([1.0])
        below = monte_carlo_convergence(1, probs, 4, eps, C, tau, need - 1, trials=20, seed=0)
        at = monte_carlo_convergence(1, probs, 4, eps, C, tau, need, trials=20, seed=0)
        assert below == 0.0
        assert at == 1.0

    def test_probs_must_sum_to_one(self):
        with pytest.raises(ValueError):
            monte_carlo_convergence(2, [0.5, 0.2], 4, 0.1, 1.0, 0.01, 10, trials=5)
