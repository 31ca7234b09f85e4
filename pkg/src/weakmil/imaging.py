"""Raster helpers shared by the generator, preprocessing and heatmaps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def luminance(rgb: np.ndarray) -> np.ndarray:
    """8-bit luminance ``round(0.299R + 0.587G + 0.114B)``, halves rounded up.

    Integer arithmetic keeps the result bit-exact across platforms.
    """
    rgb = np.asarray(rgb)
    r = rgb[..., 0].astype(np.int32)
    g = rgb[..., 1].astype(np.int32)
    b = rgb[..., 2].astype(np.int32)
    return ((299 * r + 587 * g + 114 * b + 500) // 1000).astype(np.uint8)


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(path, rgb: np.ndarray, compress_level: int = 1) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(
        path, format="PNG", compress_level=compress_level
    )


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks of an (H, W, C) array."""
    if factor == 1:
        return np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by {factor}")
    rest = img.shape[2:]
    blocks = np.asarray(img, dtype=np.float64).reshape(h // factor, factor, w // factor, factor, *rest)
    return blocks.mean(axis=(1, 3))
