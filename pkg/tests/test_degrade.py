import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from advforensics.degrade import (BLUR, BLUR_GRID, CHROMA_TABLE, IDENTITY, JPEG, JPEG_GRID, LUMA_TABLE, NOISE,
                                  NOISE_GRID, DegradationConfig, additive_noise, apply_degradation,
                                  default_grid, gaussian_blur, gaussian_kernel1d, jpeg_roundtrip,
                                  kernel_size_for_sigma, noise_std, quality_scale, scaled_table)
from advforensics.metrics import psnr
from advforensics.synthdata import textured_test_image
from oracles import jpeg_reference


def test_default_grid_values():
    assert JPEG_GRID == (90, 60, 30)
    assert np.allclose(BLUR_GRID, [0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.28, 2.56, 5.12, 10.24])
    assert NOISE_GRID == tuple(range(7))


# -- JPEG ---------------------------------------------------------------------------


def test_quality_scale_mapping():
    assert quality_scale(50) == 100
    assert quality_scale(30) == 5000 // 30
    assert quality_scale(90) == 20
    assert quality_scale(100) == 0
    assert np.array_equal(scaled_table(LUMA_TABLE, 50), LUMA_TABLE)
    assert scaled_table(LUMA_TABLE, 100).min() == 1  # floor 1


@pytest.mark.parametrize("q", [0, 101, -5])
def test_quality_out_of_range_rejected(q):
    with pytest.raises(ValueError):
        jpeg_roundtrip(np.zeros((3, 8, 8)), q)


@pytest.mark.parametrize("q", [1, 30, 50, 90, 100])
def test_constant_gray_survives(q):
    x = np.full((3, 16, 16), 0.5)
    assert np.abs(jpeg_roundtrip(x, q) - x).max() <= 1 / 255


@pytest.mark.parametrize("q", JPEG_GRID)
def test_jpeg_matches_textbook_codec(q):
    x = textured_test_image()
    ref = jpeg_reference(x, scaled_table(LUMA_TABLE, q), scaled_table(CHROMA_TABLE, q))
    np.testing.assert_allclose(jpeg_roundtrip(x, q), ref, atol=1e-9)


def test_higher_quality_higher_psnr():
    x = textured_test_image()
    assert psnr(x, jpeg_roundtrip(x, 90)) >= psnr(x, jpeg_roundtrip(x, 60)) >= psnr(x, jpeg_roundtrip(x, 30))


@pytest.mark.parametrize("q", JPEG_GRID)
def test_second_pass_changes_little(q):
    x = textured_test_image()
    once = jpeg_roundtrip(x, q)
    twice = jpeg_roundtrip(once, q)
    assert abs(psnr(x, twice) - psnr(x, once)) < 1.0


def test_jpeg_pads_and_crops_odd_sizes():
    x = np.random.default_rng(0).random((3, 13, 10))
    out = jpeg_roundtrip(x, 75)
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1


def test_jpeg_batch_equals_per_image():
    x = np.random.default_rng(1).random((3, 3, 16, 16))
    batch = jpeg_roundtrip(x, 60)
    for i in range(3):
        assert np.array_equal(batch[i], jpeg_roundtrip(x[i], 60))


# -- blur ---------------------------------------------------------------------------------


@pytest.mark.parametrize("sigma,size", [(0, 0), (0.02, 3), (1.0, 3), (1.28, 5), (2.0, 5), (2.56, 7), (10.24, 7)])
def test_kernel_rule(sigma, size):
    assert kernel_size_for_sigma(sigma) == size


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        kernel_size_for_sigma(-0.1)


def test_blur_sigma_zero_is_identity():
    x = textured_test_image()
    assert np.array_equal(gaussian_blur(x, 0), x)


@pytest.mark.parametrize("sigma", BLUR_GRID)
def test_blur_keeps_constant_image(sigma):
    x = np.full((3, 12, 12), 0.37)
    assert np.abs(gaussian_blur(x, sigma) - x).max() < 1e-12


def test_blur_spreads_point_over_3x3():
    x = np.zeros((3, 9, 9))
    x[:, 4, 4] = 1.0
    out = gaussian_blur(x, 1.0)
    assert out[0].sum() == pytest.approx(1.0)
    assert np.count_nonzero(out[0] > 0) == 9
    assert out[0, 3:6, 3:6].sum() == pytest.approx(1.0)
    k = gaussian_kernel1d(1.0)
    assert np.allclose(out[0, 3:6, 3:6], np.outer(k, k))


def test_blur_replicates_edges():
    x = np.zeros((3, 6, 6))
    x[:, :, 0] = 1.0  # bright left column
    out = gaussian_blur(x, 1.0)
    k = gaussian_kernel1d(1.0)
    # with replication the border column sees itself twice on the outside
    assert out[0, 2, 0] == pytest.approx(k[0] + k[1])


# -- noise ------------------------------------------------------------------------------


def test_noise_levels():
    assert noise_std(0) == 1 / 255
    assert noise_std(6) == 64 / 255
    with pytest.raises(ValueError):
        noise_std(-1)


def test_noise_empirical_std():
    x = np.full((3, 256, 256), 0.5)
    d = additive_noise(x, 3, seed=9) - x
    assert abs(d.std() - 8 / 255) / (8 / 255) < 0.05


def test_noise_is_seeded():
    x = textured_test_image()
    assert np.array_equal(additive_noise(x, 2, 5), additive_noise(x, 2, 5))
    assert not np.array_equal(additive_noise(x, 2, 5), additive_noise(x, 2, 6))


def test_noise_independent_of_batch_composition():
    x = np.random.default_rng(0).random((4, 3, 8, 8))
    cfg = DegradationConfig(NOISE, noise_level_i=2, seed=3)
    full = apply_degradation(x, cfg)
    part = apply_degradation(x[2:], cfg, indices=[2, 3])
    assert np.array_equal(full[2:], part)


# -- configs and invariants -------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        DegradationConfig("Sharpen")
    with pytest.raises(ValueError):
        DegradationConfig(JPEG, jpeg_quality=0)
    with pytest.raises(ValueError):
        DegradationConfig(BLUR, blur_sigma=-1)
    assert DegradationConfig(BLUR, blur_sigma=0.64).tag() == "Blur-0.64"
    assert DegradationConfig().tag() == IDENTITY


def test_default_grid_size():
    grid = default_grid()
    assert len(grid) == 1 + 3 + 10 + 7
    assert grid[0].kind == IDENTITY


def test_degradations_reduce_psnr():
    x = textured_test_image()
    for cfg in default_grid(seed=1)[1:]:
        out = apply_degradation(x[None], cfg)[0]
        mse = float(np.mean((out - x) ** 2))
        if cfg.kind == BLUR and cfg.blur_sigma <= 0.02:
            # the off-centre taps underflow to exactly zero in float64
            assert mse == 0.0
        elif mse > 1e-8:
            assert psnr(x, out) < 80.0
        else:
            assert mse > 0  # below the 80 dB cap resolution but still a change


@given(st.sampled_from(default_grid(seed=4)), st.integers(0, 100))
def test_outputs_in_unit_range_and_deterministic(cfg, seed):
    x = np.random.default_rng(seed).random((2, 3, 16, 16))
    a = apply_degradation(x, cfg)
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, apply_degradation(x, cfg))
    assert np.array_equal(x, np.random.default_rng(seed).random((2, 3, 16, 16)))  # input untouched
