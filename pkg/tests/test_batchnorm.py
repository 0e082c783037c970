import numpy as np
import pytest

from mde.batchnorm import (
    BatchStats,
    BnLayerState,
    batch_stats,
    bn_forward,
    ema_update,
    source_normalize,
    target_normalize,
)


def state(gamma=1.0, beta=0.0, mean=0.0, var=1.0, channels=1, alpha=0.9, eps=1e-5):
    full = lambda v: np.full(channels, float(v))
    return BnLayerState(
        gamma=full(gamma), beta=full(beta), running_mean=full(mean), running_var=full(var),
        retain_alpha=alpha, eps=eps,
    )


class TestBatchStats:
    def test_constant_tensor(self):
        st = batch_stats(np.full((2, 3, 4, 4), 3.0))
        np.testing.assert_allclose(st.mean, 3.0, atol=1e-12)
        np.testing.assert_allclose(st.var, 0.0, atol=1e-12)

    def test_two_values(self):
        # {0, 2}: mean 1, biased variance 1
        st = batch_stats(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
        assert st.mean[0] == 1.0
        assert st.var[0] == 1.0

    def test_four_values(self):
        # {1, 2, 3, 4}: mean 2.5, biased variance 1.25
        st = batch_stats(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert st.mean[0] == 2.5
        assert st.var[0] == 1.25

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3, 2, 5))
        st = batch_stats(x)
        # shuffle batch axis and spatial positions within each channel
        perm = rng.permutation(4)
        shuffled = x[perm]
        flat = shuffled.reshape(4, 3, 10)
        for c in range(3):
            cols = rng.permutation(10)
            flat[:, c, :] = flat[:, c, cols]
        st2 = batch_stats(flat.reshape(4, 3, 2, 5))
        np.testing.assert_allclose(st2.mean, st.mean, atol=1e-12)
        np.testing.assert_allclose(st2.var, st.var, atol=1e-12)

    def test_empty_tensor_rejected(self):
        with pytest.raises(ValueError):
            batch_stats(np.zeros((0, 1, 1, 1)))


class TestBnForward:
    def test_identity_parameters(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 3, 3))
        y = bn_forward(x, state(eps=0.0))
        np.testing.assert_array_equal(y, x)

    def test_direct_substitution(self):
        # x=2, mu=1, var=1, eps=0, gamma=3, beta=0.5 -> 3.5
        y = bn_forward(np.full((1, 1, 1, 1), 2.0), state(gamma=3.0, beta=0.5, mean=1.0, var=1.0, eps=0.0))
        assert y[0, 0, 0, 0] == pytest.approx(3.5, abs=1e-12)

    def test_zero_gamma_gives_constant_beta(self):
        x = np.random.default_rng(1).normal(size=(2, 2, 2, 2))
        y = bn_forward(x, state(gamma=0.0, beta=0.7, channels=2))
        np.testing.assert_allclose(y, 0.7, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            bn_forward(np.zeros((1, 3, 2, 2)), state(channels=2))


class TestEmaUpdate:
    def test_alpha_zero_copies_batch(self):
        s = ema_update(state(mean=5.0, var=7.0, alpha=0.0), BatchStats(mean=np.array([1.0]), var=np.array([2.0])))
        assert s.running_mean[0] == 1.0
        assert s.running_var[0] == 2.0

    def test_alpha_one_freezes(self):
        s = ema_update(state(mean=5.0, var=7.0, alpha=1.0), BatchStats(mean=np.array([1.0]), var=np.array([2.0])))
        assert s.running_mean[0] == 5.0
        assert s.running_var[0] == 7.0

    def test_direct_substitution(self):
        s = ema_update(state(mean=0.0, alpha=0.9), BatchStats(mean=np.array([1.0]), var=np.array([1.0])))
        assert s.running_mean[0] == pytest.approx(0.1, abs=1e-12)

    def test_returns_new_state(self):
        s0 = state()
        s1 = ema_update(s0, BatchStats(mean=np.array([1.0]), var=np.array([1.0])))
        assert s1 is not s0
        assert s0.running_mean[0] == 0.0

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ema_update(state(channels=2), BatchStats(mean=np.zeros(3), var=np.ones(3)))


class TestNormalization:
    def test_source_equals_target_under_zero_drift(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(8, 3, 4, 4))
        st = batch_stats(x)
        s = BnLayerState(
            gamma=np.array([2.0, -1.5, 0.01]),
            beta=np.array([0.3, -0.7, 1.1]),
            running_mean=st.mean,
            running_var=st.var,
            eps=0.0,
        )
        lhs = source_normalize(bn_forward(x, s), s)
        rhs = target_normalize(x, st, eps=0.0)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_direct_substitution(self):
        # beta=0, gamma=2, y=4 -> 2
        out = source_normalize(np.full((1, 1, 1, 1), 4.0), state(gamma=2.0))
        assert out[0, 0, 0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_gamma_guard(self):
        out = source_normalize(np.full((1, 1, 1, 1), 4.0), state(gamma=1e-12))
        assert np.isfinite(out).all()
        assert out[0, 0, 0, 0] == pytest.approx(4.0 / 1e-6)

    def test_negative_gamma_guard_keeps_sign(self):
        out = source_normalize(np.full((1, 1, 1, 1), 4.0), state(gamma=-1e-12))
        assert out[0, 0, 0, 0] == pytest.approx(-4.0 / 1e-6)

    def test_recovers_standardized_input(self):
        # bn_forward then source_normalize == (x - mu) / sigma when |gamma| >= 1e-3
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 2, 3, 3))
        s = state(gamma=1e-3, beta=0.4, mean=0.2, var=2.0, channels=2, eps=0.0)
        expected = (x - 0.2) / np.sqrt(2.0)
        np.testing.assert_allclose(source_normalize(bn_forward(x, s), s), expected, atol=1e-9)

    def test_target_constant_channel_is_zero(self):
        out = target_normalize(np.full((2, 2, 2, 2), 5.0), batch_stats(np.full((2, 2, 2, 2), 5.0)), eps=1e-5)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_target_two_values(self):
        x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
        out = target_normalize(x, batch_stats(x), eps=0.0)
        np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-12)

    def test_target_output_standardized(self):
        rng = np.random.default_rng(4)
        x = rng.normal(3.0, 2.0, size=(16, 4, 8, 8))
        eps = 1e-5
        out = target_normalize(x, batch_stats(x), eps=eps)
        means = out.mean(axis=(0, 2, 3))
        variances = out.var(axis=(0, 2, 3))
        assert np.abs(means).max() <= 1e-9
        # var(out) = var / (var + eps), an eps-fraction below 1
        assert np.all(variances <= 1.0 + 1e-12)
        assert np.all(variances >= 1.0 - eps)


class TestStateValidation:
    def test_negative_running_var_rejected(self):
        with pytest.raises(ValueError):
            state(var=-1.0)

    def test_negative_eps_rejected(self):
        with pytest.raises(ValueError):
            state(eps=-1e-9)

    def test_retain_alpha_range(self):
        with pytest.raises(ValueError):
            state(alpha=1.5)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            BnLayerState(gamma=np.ones(2), beta=np.zeros(3), running_mean=np.zeros(2), running_var=np.ones(2))


class TestEmaConvergence:
    """Long-stream behavior of the running estimates (module-scale: 3 seeds)."""

    @staticmethod
    def run_stream(seed, alpha, batches=500):
        rng = np.random.default_rng(seed)
        s = BnLayerState.identity(8, retain_alpha=alpha)
        for _ in range(batches):
            s = ema_update(s, batch_stats(rng.normal(0.7, 1.5, size=(8, 8, 2, 2))))
        return s

    def test_running_mean_tracks_true_mean(self):
        se = 1.5 / np.sqrt(8 * 2 * 2)  # batch standard error per channel
        for seed in range(3):
            s = self.run_stream(seed, alpha=0.9)
            assert np.abs(s.running_mean - 0.7).max() <= 3 * se

    def test_variance_gap_shrinks_with_larger_retain(self):
        # steady-state |running_var - true var| ranks monotonically with alpha:
        # retaining more of the history averages away more batch noise
        for seed in range(3):
            gaps = {a: float(np.abs(self.run_stream(seed, a).running_var - 2.25).mean()) for a in (0.5, 0.9, 0.99)}
            assert gaps[0.5] >= gaps[0.9] >= gaps[0.99]
