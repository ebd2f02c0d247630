"""Pre- and post-processing: crop/resize, background masks and Lab colour transfer.

Images are float64 arrays of shape (H, W, 3) with values in [0, 1]. Lab
conversion uses the sRGB transfer curve and the sRGB->XYZ matrix; the
reference white is the XYZ image of RGB (1, 1, 1) under that matrix, so
white maps to L=100, a=b=0 exactly.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

SRGB_TO_XYZ = np.array([
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
])
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
WHITE_XYZ = SRGB_TO_XYZ.sum(axis=1)

_GAMMA_KNEE = 0.04045
_LINEAR_KNEE = _GAMMA_KNEE / 12.92
_DELTA = 6.0 / 29.0
STD_FLOOR = 1e-8


class ImageError(ValueError):
    pass


def _as_rgb(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ImageError(f"expected an (H, W, 3) image, got shape {a.shape}")
    return a


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


def center_crop(img, crop: int) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape[:2]
    if h < crop or w < crop:
        raise ImageError(f"image {h}x{w} is smaller than the {crop}x{crop} crop")
    top, left = (h - crop) // 2, (w - crop) // 2
    return a[top:top + crop, left:left + crop].copy()


def box_downsample(img, factor: int) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape[:2]
    if h % factor or w % factor:
        raise ImageError(f"{h}x{w} is not divisible by {factor}")
    return a.reshape(h // factor, factor, w // factor, factor, *a.shape[2:]).mean(axis=(1, 3))


def _bilinear_axis(n_in: int, n_out: int):
    # pixel centres aligned: x_in = (x_out + 0.5) * n_in / n_out - 0.5, clamped at the edges
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_resize(img, out_h: int, out_w: int) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape[:2]
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    extra = (1,) * (a.ndim - 2)
    fr = fr.reshape(-1, 1, *extra)
    fc = fc.reshape(1, -1, *extra)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def center_crop_resize(img, crop: int = 128, out: int = 64) -> np.ndarray:
    """Central ``crop`` square (floor offsets) resized to ``out``.

    Box averaging when crop = 2 * out, bilinear otherwise.
    """
    if crop <= 0 or out <= 0:
        raise ImageError("crop and out must be positive")
    c = center_crop(img, crop)
    if crop == out:
        return c
    if crop == 2 * out:
        return box_downsample(c, 2)
    return bilinear_resize(c, out, out)


def apply_mask(img, mask, background_value: float = 1.0) -> np.ndarray:
    """Keep foreground (mask true/1) pixels, set the rest to ``background_value``."""
    a = np.asarray(img, dtype=np.float64)
    m = np.asarray(mask)
    if m.shape != a.shape[:2]:
        raise ImageError(f"mask shape {m.shape} does not match image {a.shape[:2]}")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ImageError("mask must be binary (0/1)")
        m = m.astype(bool)
    out = np.full_like(a, float(background_value))
    out[m] = a[m]
    return out


# --------------------------------------------------------------------------
# colour
# --------------------------------------------------------------------------


def srgb_to_linear(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= _GAMMA_KNEE, c / 12.92, ((np.maximum(c, _GAMMA_KNEE) + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= _LINEAR_KNEE, v * 12.92, 1.055 * np.maximum(v, _LINEAR_KNEE) ** (1 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _finv(f):
    return np.where(f > _DELTA, f ** 3, 3 * _DELTA ** 2 * (f - 4.0 / 29.0))


def rgb_to_lab(img) -> np.ndarray:
    rgb = np.asarray(img, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ImageError(f"last axis must hold 3 channels, got shape {rgb.shape}")
    xyz = srgb_to_linear(rgb) @ SRGB_TO_XYZ.T
    fx, fy, fz = (_f(xyz[..., i] / WHITE_XYZ[i]) for i in range(3))
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_rgb_unclipped(lab) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_finv(fx) * WHITE_XYZ[0], _finv(fy) * WHITE_XYZ[1], _finv(fz) * WHITE_XYZ[2]], axis=-1)
    lin = xyz @ XYZ_TO_SRGB.T
    # the power branch is undefined for negative linear values; mirror it
    return np.sign(lin) * linear_to_srgb(np.abs(lin))


def out_of_gamut(lab, tol: float = 1e-12) -> int:
    """Number of pixels whose RGB would need clipping."""
    rgb = lab_to_rgb_unclipped(lab)
    bad = np.any((rgb < -tol) | (rgb > 1 + tol), axis=-1)
    return int(np.count_nonzero(bad))


def lab_to_rgb(lab) -> np.ndarray:
    rgb = lab_to_rgb_unclipped(lab)
    n = int(np.count_nonzero(np.any((rgb < 0) | (rgb > 1), axis=-1)))
    if n:
        log.debug("lab_to_rgb: clipped %d pixel(s)", n)
    return np.clip(rgb, 0.0, 1.0)


def lab_stats(lab, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std, over ``mask`` pixels if given."""
    px = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        if m.shape[0] != px.shape[0]:
            raise ImageError("mask does not match image size")
        if not m.any():
            raise ImageError("mask selects no pixels")
        px = px[m]
    return px.mean(axis=0), px.std(axis=0)


def transfer_lab_stats(target_lab, source_lab, target_mask=None, source_mask=None) -> np.ndarray:
    """Match each Lab channel's mean and std to the source (no clipping)."""
    tgt = np.asarray(target_lab, dtype=np.float64)
    mt, st = lab_stats(tgt, target_mask)
    ms, ss = lab_stats(source_lab, source_mask)
    scale = np.where(st < STD_FLOOR, 1.0, ss / np.where(st < STD_FLOOR, 1.0, st))
    return (tgt - mt) * scale + ms


def color_correct(target, source, target_mask=None, source_mask=None) -> np.ndarray:
    """Lab statistics transfer from ``source`` onto ``target``, back to clipped RGB."""
    lab = transfer_lab_stats(rgb_to_lab(_as_rgb(target)), rgb_to_lab(_as_rgb(source)), target_mask, source_mask)
    return lab_to_rgb(lab)
