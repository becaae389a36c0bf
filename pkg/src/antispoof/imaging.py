"""Image I/O (binary PPM/PGM), corner-aligned bilinear resize and the heat colormap."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageReadError(OSError):
    pass


def read_image(path: str | Path) -> np.ndarray:
    """Decode an image file to an (H, W, 3) uint8 array; gray images are replicated."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    """Write uint8 pixels as binary PGM (2-D or single channel) or PPM (3 channels)."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if not (arr.ndim == 2 or arr.ndim == 3 and arr.shape[2] == 3):
        raise ValueError(f"cannot write image with shape {arr.shape}")
    Image.fromarray(arr).save(path, format="PPM")


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with corner-aligned sample grids.

    Output pixel (0, 0) samples input (0, 0) and the last output pixel
    samples the last input pixel. Returns float64.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    src = np.asarray(img, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    h, w = src.shape[:2]

    def grid(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = grid(h, out_h)
    x0, x1, fx = grid(w, out_w)
    fx = fx[None, :, None]
    top = src[y0][:, x0] + (src[y0][:, x1] - src[y0][:, x0]) * fx
    bot = src[y1][:, x0] + (src[y1][:, x1] - src[y1][:, x0]) * fx
    out = top + (bot - top) * fy[:, None, None]
    return out[..., 0] if squeeze else out


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to a blue -> red ramp: (255*v, 0, 255*(1-v)) as float RGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([255.0 * v, np.zeros_like(v), 255.0 * (1.0 - v)], axis=-1)
