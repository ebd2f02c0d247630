import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddimlab.core import RngStream
from ddimlab.dataset import mirror_image
from ddimlab.imageops import (
    ImageError,
    apply_mask,
    bilinear_resize,
    center_crop,
    center_crop_resize,
    color_correct,
    lab_stats,
    lab_to_rgb,
    lab_to_rgb_unclipped,
    linear_to_srgb,
    out_of_gamut,
    rgb_to_lab,
    srgb_to_linear,
    transfer_lab_stats,
)


# -- geometry ----------------------------------------------------------------


def test_checkerboard_averages_to_half():
    i, j = np.indices((128, 128))
    board = np.repeat(((i + j) % 2).astype(float)[..., None], 3, axis=2)
    out = center_crop_resize(board)
    assert out.shape == (64, 64, 3)
    assert np.all(out == 0.5)


def test_crop_uses_floor_offsets():
    img = np.arange(5 * 6, dtype=float).reshape(5, 6)
    np.testing.assert_array_equal(center_crop(img, 2), img[1:3, 2:4])
    with pytest.raises(ImageError):
        center_crop(img, 6)


@pytest.mark.parametrize("size", [(130, 132), (140, 128), (128, 128)])
def test_mirror_commutes_with_crop_when_excess_even(size):
    img = RngStream(0).uniform((*size, 3))
    a = mirror_image(center_crop_resize(img))
    b = center_crop_resize(mirror_image(img))
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_bilinear_identity_and_constant():
    img = RngStream(1).uniform((9, 7, 3))
    np.testing.assert_allclose(bilinear_resize(img, 9, 7), img, atol=1e-15)
    np.testing.assert_allclose(bilinear_resize(np.full((10, 10), 0.3), 4, 6), 0.3, atol=1e-15)
    out = center_crop_resize(RngStream(2).uniform((100, 100, 3)), crop=90, out=64)
    assert out.shape == (64, 64, 3)


def test_bilinear_preserves_linear_ramp_interior():
    ramp = np.tile(np.arange(8, dtype=float), (4, 1))
    up = bilinear_resize(ramp, 4, 16)
    # pixel centre k of the output sits at input coordinate (k + 0.5) / 2 - 0.5
    expected = np.clip((np.arange(16) + 0.5) / 2 - 0.5, 0, 7)
    np.testing.assert_allclose(up[0], expected, atol=1e-14)


def test_apply_mask():
    img = np.zeros((2, 2, 3))
    m = np.array([[1, 0], [0, 1]])
    out = apply_mask(img, m)
    assert out[0, 1].tolist() == [1.0, 1.0, 1.0] and out[0, 0].tolist() == [0.0, 0.0, 0.0]
    assert np.all(apply_mask(img, m.astype(bool), background_value=0.25)[1, 0] == 0.25)
    with pytest.raises(ImageError):
        apply_mask(img, np.array([[2, 0], [0, 1]]))
    with pytest.raises(ImageError):
        apply_mask(img, np.ones((3, 2)))


# -- colour ------------------------------------------------------------------


def test_white_and_black():
    np.testing.assert_allclose(rgb_to_lab(np.ones(3)), [100, 0, 0], atol=1e-12)
    np.testing.assert_allclose(rgb_to_lab(np.zeros(3)), [0, 0, 0], atol=1e-12)


def test_primaries_match_published_values():
    # reference Lab (D65) of the sRGB primaries
    np.testing.assert_allclose(rgb_to_lab(np.array([1.0, 0, 0])), [53.24, 80.09, 67.20], atol=0.05)
    np.testing.assert_allclose(rgb_to_lab(np.array([0, 1.0, 0])), [87.73, -86.18, 83.18], atol=0.05)
    np.testing.assert_allclose(rgb_to_lab(np.array([0, 0, 1.0])), [32.30, 79.19, -107.86], atol=0.05)


def test_gray_ramp_is_neutral_and_monotone():
    g = np.linspace(0, 1, 51)
    lab = rgb_to_lab(np.stack([g, g, g], axis=1))
    assert np.all(np.diff(lab[:, 0]) > 0)
    assert np.max(np.abs(lab[:, 1:])) <= 1e-3


def test_gamma_curve_inverse():
    c = np.linspace(0, 1, 1001)
    np.testing.assert_allclose(linear_to_srgb(srgb_to_linear(c)), c, atol=1e-14)
    knee = 0.04045
    assert srgb_to_linear(knee) == pytest.approx(((knee + 0.055) / 1.055) ** 2.4, rel=1e-4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(0, 1)))
def test_lab_roundtrip(rgb):
    lab = rgb_to_lab(rgb)
    # the standard sRGB curve jumps by ~3e-8 at its 0.04045 knee
    np.testing.assert_allclose(lab_to_rgb(lab), rgb, atol=1e-6, rtol=0)
    assert out_of_gamut(lab) == 0


def test_out_of_gamut_counts_pixels():
    lab = np.array([[50.0, 0, 0], [50.0, 150.0, 0], [120.0, 0, 0]])
    assert out_of_gamut(lab) == 2
    clipped = lab_to_rgb(lab)
    assert clipped.min() >= 0 and clipped.max() <= 1
    assert np.any(lab_to_rgb_unclipped(lab) > 1)


def test_transfer_matches_source_statistics():
    rng = RngStream(3)
    tgt = rgb_to_lab(rng.uniform((20, 20, 3)))
    src = rgb_to_lab(0.2 + 0.5 * rng.uniform((10, 30, 3)))
    out = transfer_lab_stats(tgt, src)
    mo, so = lab_stats(out)
    ms, ss = lab_stats(src)
    np.testing.assert_allclose(mo, ms, atol=1e-10)
    np.testing.assert_allclose(so, ss, rtol=1e-10)


def test_transfer_of_self_is_identity():
    lab = rgb_to_lab(RngStream(4).uniform((8, 8, 3)))
    np.testing.assert_allclose(transfer_lab_stats(lab, lab), lab, atol=1e-12)


def test_constant_gray_target_only_shifts():
    tgt = np.full((4, 4, 3), 0.5)
    src = RngStream(5).uniform((6, 6, 3))
    out = transfer_lab_stats(rgb_to_lab(tgt), rgb_to_lab(src))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, np.broadcast_to(lab_stats(rgb_to_lab(src))[0], out.shape), atol=1e-10)


def test_masked_statistics_ignore_background():
    rng = RngStream(6)
    src = rng.uniform((10, 10, 3))
    mask = np.zeros((10, 10), bool)
    mask[2:8, 2:8] = True
    src_noisy_bg = src.copy()
    src_noisy_bg[~mask] = rng.uniform((int((~mask).sum()), 3))
    tgt = rng.uniform((10, 10, 3))
    a = color_correct(tgt, src, source_mask=mask)
    b = color_correct(tgt, src_noisy_bg, source_mask=mask)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ImageError):
        lab_stats(rgb_to_lab(src), np.zeros((10, 10), bool))


def test_color_correct_shape_checks():
    with pytest.raises(ImageError):
        color_correct(np.zeros((4, 4)), np.zeros((4, 4, 3)))
    out = color_correct(RngStream(7).uniform((4, 5, 3)), RngStream(8).uniform((3, 3, 3)))
    assert out.shape == (4, 5, 3) and out.min() >= 0 and out.max() <= 1
