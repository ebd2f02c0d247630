"""Binary netpbm I/O: PPM (P6) colour images and PGM (P5) grayscale/masks, 8 bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensorio import atomic_write_bytes


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, n: int) -> tuple[list[bytes], int]:
    """First ``n`` header tokens and the offset just past the single whitespace after the last."""
    toks: list[bytes] = []
    i, size = 0, len(data)
    while len(toks) < n:
        while i < size and data[i:i + 1].isspace():
            i += 1
        if i < size and data[i:i + 1] == b"#":
            while i < size and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < size and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise ImageFormatError("truncated netpbm header")
        toks.append(data[i:j])
        i = j
    if i >= size or not data[i:i + 1].isspace():
        raise ImageFormatError("missing whitespace after netpbm header")
    return toks, i + 1


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to float64 in [0, 1]; shape (H, W) for P5, (H, W, 3) for P6."""
    toks, off = _tokens(data, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported netpbm magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as e:
        raise ImageFormatError(f"bad netpbm header: {e}") from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"bad image size {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images are supported (maxval {maxval})")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    body = data[off:off + need]
    if len(body) != need:
        raise ImageFormatError(f"expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape((h, w, 3) if ch == 3 else (h, w))


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up; values outside are clipped."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot encode array of shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageFormatError("image contains non-finite values")
    h, w = img.shape[:2]
    q = img if img.dtype == np.uint8 else quantize(img)
    return magic + f"\n{w} {h}\n255\n".encode() + q.tobytes()


def read_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_image(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(img))


def read_mask(path) -> np.ndarray:
    """PGM mask with values {0, 255} as a boolean array."""
    img = decode_pnm(Path(path).read_bytes())
    if img.ndim != 2:
        raise ImageFormatError("mask must be a PGM (P5) image")
    levels = np.unique(np.round(img * 255.0))
    if not set(levels.tolist()) <= {0.0, 255.0}:
        raise ImageFormatError(f"mask is not binary; found levels {levels[:5].tolist()}")
    return img > 0.5
