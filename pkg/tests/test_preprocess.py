import numpy as np
import pytest

from tokencast.errors import InputTooShortError
from tokencast.preprocess import (
    NormStats,
    denormalize,
    detokenize,
    flatten_channels,
    instance_normalize,
    tokenize,
)


class TestFlatten:
    def test_seven_channels(self, rng):
        x = rng.normal(size=(7, 336))
        windows = flatten_channels(x)
        assert len(windows) == 7
        assert all(w.shape == (336,) for w in windows)

    def test_single_channel_identity(self, rng):
        x = rng.normal(size=(1, 20))
        (w,) = flatten_channels(x)
        np.testing.assert_array_equal(w, x[0])

    def test_roundtrip(self, rng):
        x = rng.normal(size=(4, 30))
        np.testing.assert_array_equal(np.stack(flatten_channels(x)), x)


class TestTokenize:
    def test_standard_shape(self, rng):
        tokens = tokenize(rng.normal(size=336), 48)
        assert tokens.shape == (7, 48)

    def test_roundtrip_bit_exact(self, rng):
        w = rng.normal(size=336)
        np.testing.assert_array_equal(detokenize(tokenize(w, 48)), w)

    def test_remainder_drops_oldest(self, rng):
        w = rng.normal(size=100)
        tokens = tokenize(w, 48)
        assert tokens.shape == (2, 48)
        np.testing.assert_array_equal(detokenize(tokens), w[4:])

    def test_too_short(self):
        with pytest.raises(InputTooShortError):
            tokenize(np.zeros(10), 48)

    def test_order_preserved(self):
        tokens = tokenize(np.arange(12.0), 4)
        np.testing.assert_array_equal(tokens[1], [4, 5, 6, 7])


class TestNormalize:
    def test_constant_window(self):
        out, stats = instance_normalize(np.array([5.0, 5.0, 5.0, 5.0]), eps=1e-5)
        np.testing.assert_array_equal(out, np.zeros(4))
        assert stats.mu == 5.0 and stats.sigma == 0.0

    def test_two_point(self):
        out, stats = instance_normalize(np.array([0.0, 2.0]), eps=1e-5)
        assert stats.mu == 1.0 and stats.sigma == 1.0
        np.testing.assert_allclose(out, [-0.99999, 0.99999], rtol=1e-4)

    def test_moments(self, rng):
        w = rng.normal(3.0, 2.0, size=500)
        out, _ = instance_normalize(w)
        assert abs(out.mean()) < 1e-10
        assert abs(out.std() - 1.0) < 1e-4

    def test_empty_rejected(self):
        with pytest.raises(InputTooShortError):
            instance_normalize(np.array([]))


class TestDenormalize:
    def test_roundtrip_identity(self, rng):
        for _ in range(20):
            w = rng.normal(rng.uniform(-5, 5), rng.uniform(0.01, 10), size=64)
            out, stats = instance_normalize(w)
            np.testing.assert_allclose(denormalize(out, stats), w, atol=1e-10)

    def test_zero_maps_to_mean(self):
        _, stats = instance_normalize(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(denormalize(np.zeros(5), stats), stats.mu)

    def test_hand_case(self):
        stats = NormStats(mu=1.0, sigma=2.0, eps=0.0)
        np.testing.assert_array_equal(denormalize(np.array([1.0]), stats), [3.0])


class TestEquivariance:
    def test_affine_inputs_normalize_identically(self, rng):
        w = rng.normal(size=128)
        base, _ = instance_normalize(w, eps=1e-5)
        scaled, _ = instance_normalize(3.0 * w + 7.0, eps=1e-5)
        assert np.abs(scaled - base).max() < 1e-3
