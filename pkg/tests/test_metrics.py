import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from petprompt.data import Volume3D
from petprompt.errors import ShapeError
from petprompt.metrics import SSIMConfig, ensemble_stats, gaussian_window, mae, mse, psnr, ssim3d


@pytest.fixture
def pair(rng):
    return rng.uniform(0, 4, size=(8, 8, 8)), rng.uniform(0, 4, size=(8, 8, 8))


class TestPointwise:
    def test_identical(self, pair):
        a, _ = pair
        assert mae(a, a) == 0 and mse(a, a) == 0

    def test_unit_offset(self, pair):
        a, _ = pair
        assert mae(a + 1, a) == pytest.approx(1, abs=1e-12)
        assert mse(a + 1, a) == pytest.approx(1, abs=1e-12)

    def test_against_loops(self, pair):
        a, b = pair
        assert mae(a, b) == pytest.approx(oracles.mae(a, b), abs=1e-12)
        assert mse(a, b) == pytest.approx(oracles.mse(a, b), abs=1e-12)

    def test_symmetric(self, pair):
        a, b = pair
        assert mae(a, b) == mae(b, a) and mse(a, b) == mse(b, a)

    def test_volumes_and_mask(self):
        a = Volume3D(np.zeros((2, 2, 2)), role="ground_truth")
        b = np.zeros((2, 2, 2))
        b[0, 0, 0] = 3
        mask = np.zeros((2, 2, 2), bool)
        mask[0, 0, 0] = True
        assert mae(b, a) == pytest.approx(3 / 8)
        assert mae(b, a, mask) == 3.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mae(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestPSNR:
    def test_closed_form(self):
        ref = np.zeros((10, 10, 10))
        pred = ref + 0.1
        assert psnr(pred, ref, data_range=1.0) == pytest.approx(20.0, abs=1e-12)

    def test_identical_is_infinite(self, pair):
        a, _ = pair
        assert psnr(a, a) == math.inf

    def test_from_mse(self, pair):
        a, b = pair
        L = b.max()
        assert psnr(a, b) == pytest.approx(10 * math.log10(L * L / mse(a, b)), abs=1e-10)
        assert psnr(a, b) == pytest.approx(oracles.psnr(a, b, L), abs=1e-8)

    def test_zero_reference_needs_range(self):
        with pytest.raises(ValueError):
            psnr(np.ones((4, 4, 4)), np.zeros((4, 4, 4)))
        assert np.isfinite(psnr(np.ones((4, 4, 4)), np.zeros((4, 4, 4)), data_range=1.0))

    def test_decreases_with_noise(self, rng):
        ref = rng.uniform(0, 4, size=(16, 16, 16))
        noise = rng.normal(size=ref.shape)
        values = [psnr(ref + s * noise, ref) for s in (0.01, 0.05, 0.1, 0.5, 1.0)]
        assert all(x > y for x, y in zip(values, values[1:]))


class TestSSIM:
    def test_identity(self, pair):
        a, _ = pair
        assert ssim3d(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_constant_fields(self):
        c, d = 2.0, 0.5
        ref, pred = np.full((8, 8, 8), c), np.full((8, 8, 8), c + d)
        c1 = (0.01 * c) ** 2
        expected = (2 * c * (c + d) + c1) / (c * c + (c + d) ** 2 + c1)
        assert ssim3d(pred, ref) == pytest.approx(expected, abs=1e-12)

    def test_against_triple_loop(self, pair):
        a, b = pair
        assert ssim3d(a, b) == pytest.approx(oracles.ssim(a, b, L=b.max()), abs=1e-8)

    def test_against_triple_loop_anisotropic(self, rng):
        a, b = rng.uniform(0, 2, size=(9, 7, 6)), rng.uniform(0, 2, size=(9, 7, 6))
        cfg = SSIMConfig(window_size=3, sigma=0.8, data_range=2.0)
        assert ssim3d(a, b, cfg) == pytest.approx(oracles.ssim(a, b, 2.0, size=3, sigma=0.8), abs=1e-8)

    def test_symmetric_for_fixed_range(self, pair):
        a, b = pair
        cfg = SSIMConfig(data_range=4.0)
        assert ssim3d(a, b, cfg) == pytest.approx(ssim3d(b, a, cfg), abs=1e-9)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim3d(np.ones((8, 8, 4)), np.ones((8, 8, 4)))

    def test_window_normalized(self):
        g = gaussian_window()
        assert g.shape == (5, 5, 5) and g.sum() == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(
        a=arrays(np.float64, (6, 6, 6), elements=st.floats(0, 10)),
        b=arrays(np.float64, (6, 6, 6), elements=st.floats(0, 10)),
    )
    def test_bounded(self, a, b):
        value = ssim3d(a, b, SSIMConfig(data_range=10.0))
        assert -1 - 1e-9 <= value <= 1 + 1e-9


class TestEnsemble:
    def test_hand_case(self):
        s = ensemble_stats([np.full((1, 1, 1), 1.0), np.full((1, 1, 1), 3.0)], np.full((1, 1, 1), 2.0))
        assert (s.bias_map.item(), s.std_map.item(), s.rmse_map.item()) == pytest.approx((0, math.sqrt(2), math.sqrt(2)), abs=1e-15)

    def test_constant_bias(self):
        s = ensemble_stats([np.ones((1, 1, 1))] * 3, np.zeros((1, 1, 1)))
        assert (s.bias_map.item(), s.std_map.item(), s.rmse_map.item()) == (1.0, 0.0, 1.0)

    def test_perfect(self, pair):
        a, _ = pair
        s = ensemble_stats([a, a, a], a)
        assert s.mean_abs_bias == s.mean_std == s.mean_rmse == 0

    def test_against_loops(self, rng):
        y = rng.uniform(0, 3, size=(8, 8, 8))
        xs = [y + rng.normal(0.1, 0.3, size=y.shape) for _ in range(5)]
        s = ensemble_stats(xs, y)
        for i, (m, sd, r) in oracles.ensemble(xs, y).items():
            assert s.bias_map[i] == pytest.approx(m, abs=1e-8)
            assert s.std_map[i] == pytest.approx(sd, abs=1e-8)
            assert s.rmse_map[i] == pytest.approx(r, abs=1e-8)
        assert s.k == 5

    def test_shift_invariance(self, rng):
        y = rng.uniform(0, 3, size=(4, 4, 4))
        xs = [y + rng.normal(size=y.shape) for _ in range(4)]
        a = ensemble_stats(xs, y)
        b = ensemble_stats([x + 7.5 for x in xs], y + 7.5)
        assert np.allclose(a.std_map, b.std_map, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(k=st.integers(2, 6), seed=st.integers(0, 2**32 - 1))
    def test_rmse_decomposition(self, k, seed):
        rng = np.random.default_rng(seed)
        y = rng.uniform(0, 3, size=(3, 3, 3))
        xs = [y + rng.normal(rng.normal(), 1, size=y.shape) for _ in range(k)]
        s = ensemble_stats(xs, y)
        assert np.allclose(s.rmse_map**2, s.bias_map**2 + s.std_map**2, atol=1e-9, rtol=0)

    def test_mask_aggregates(self):
        y = np.zeros((2, 1, 1))
        xs = [np.array([1.0, 5.0]).reshape(2, 1, 1)] * 2
        mask = np.array([True, False]).reshape(2, 1, 1)
        assert ensemble_stats(xs, y, mask).mean_abs_bias == 1.0
        assert ensemble_stats(xs, y).mean_abs_bias == 3.0

    def test_needs_two(self):
        with pytest.raises(ValueError):
            ensemble_stats([np.zeros((2, 2, 2))], np.zeros((2, 2, 2)))
