"""Per-class attention heatmaps over slide thumbnails.

Each patch cell of the grid becomes an 8x8 block of the thumbnail.  Kept
cells are tinted along a blue (low) to red (high) ramp; everything else is
left as is.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DimensionError, EmptyBagError
from .imaging import save_png
from .mil import attention_scores

THUMB_CELL = 8
INDEX_HEADER = ["slide_id", "class", "path", "min_raw", "max_raw"]


def normalize_attention(scores, clip=(1.0, 99.0), clip_min_n: int = 100) -> np.ndarray:
    """Min-max scale scores to [0, 1].

    For ``N >= clip_min_n`` the scores are first clipped to the ``clip``
    percentiles.  Constant input maps to 0.5 everywhere.
    """
    x = np.asarray(scores, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise EmptyBagError("cannot normalize an empty score vector")
    if clip is not None and x.size >= clip_min_n:
        lo, hi = np.percentile(x, clip)
        x = np.clip(x, lo, hi)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full(x.size, 0.5)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


@dataclass
class AttentionMap:
    """Normalized values on the patch grid; ``NaN`` marks cells without a patch."""

    slide_id: str
    class_id: int
    values: np.ndarray

    @classmethod
    def from_scores(cls, slide_id: str, class_id: int, coords, scores, grid_shape,
                    **norm_kwargs) -> "AttentionMap":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        if len(coords) != np.size(scores):
            raise DimensionError(f"{len(coords)} coords for {np.size(scores)} scores")
        grid = np.full(grid_shape, np.nan)
        grid[coords[:, 0], coords[:, 1]] = normalize_attention(scores, **norm_kwargs)
        return cls(slide_id, class_id, grid)

    @property
    def kept(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def mean_over(self, cells) -> float:
        cells = list(cells)
        if not cells:
            return float("nan")
        r, c = np.asarray(cells, dtype=np.int64).T
        return float(np.nanmean(self.values[r, c]))


def thumbnail(rgb: np.ndarray, grid_shape, patch_px_source: int, cell: int = THUMB_CELL) -> np.ndarray:
    """Box-filtered slide downsample with ``cell`` x ``cell`` pixels per patch."""
    rows, cols = grid_shape
    h, w = rows * patch_px_source, cols * patch_px_source
    if rgb.shape[0] < h or rgb.shape[1] < w:
        raise DimensionError(f"slide {rgb.shape[:2]} smaller than grid {rows}x{cols} of {patch_px_source}px")
    img = Image.fromarray(np.ascontiguousarray(rgb[:h, :w], dtype=np.uint8))
    return np.asarray(img.resize((cols * cell, rows * cell), Image.BOX))


def colormap(v) -> np.ndarray:
    """Blue (0) to red (1) ramp, float RGB in 0-255."""
    v = np.asarray(v, dtype=np.float64)
    return np.stack([255.0 * v, np.zeros_like(v), 255.0 * (1.0 - v)], axis=-1)


def render_overlay(thumb: np.ndarray, amap: AttentionMap, alpha: float = 0.5,
                   cell: int = THUMB_CELL) -> np.ndarray:
    rows, cols = amap.values.shape
    if thumb.shape[:2] != (rows * cell, cols * cell):
        raise DimensionError(f"thumbnail {thumb.shape[:2]} does not match grid {rows}x{cols} at {cell}px")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    out = np.array(thumb, dtype=np.uint8, copy=True)
    for r, c in zip(*np.nonzero(amap.kept)):
        block = out[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell].astype(np.float64)
        mixed = (1.0 - alpha) * block + alpha * colormap(amap.values[r, c])
        out[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell] = np.floor(mixed + 0.5).astype(np.uint8)
    return out


def heatmap_filename(slide_id: str, class_id: int) -> str:
    return f"{slide_id}_class{class_id}.png"


def emit_class_pair(slide_id: str, rgb: np.ndarray, grid, bag, params, out_dir,
                    alpha: float = 0.5, **norm_kwargs) -> list[tuple]:
    """Write one overlay per class; returns index rows ``(slide_id, class, path, min_raw, max_raw)``.

    ``norm_kwargs`` go to :func:`normalize_attention`.
    """
    if len(bag) == 0:
        raise EmptyBagError(f"slide {slide_id} has an empty bag")
    rows = max(r.row for r in grid.records) + 1
    cols = max(r.col for r in grid.records) + 1
    thumb = thumbnail(rgb, (rows, cols), grid.patch_px_source)
    attn = attention_scores(bag, params)
    out_dir = Path(out_dir)
    written = []
    for c in range(attn.shape[0]):
        amap = AttentionMap.from_scores(slide_id, c, bag.coords, attn[c], (rows, cols), **norm_kwargs)
        path = out_dir / heatmap_filename(slide_id, c)
        save_png(path, render_overlay(thumb, amap, alpha))
        written.append((slide_id, c, path, float(attn[c].min()), float(attn[c].max())))
    return written


def write_heatmap_index(rows, path, relative_to=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_HEADER)
        for sid, c, p, lo, hi in rows:
            p = Path(p)
            if relative_to is not None:
                p = p.relative_to(relative_to)
            w.writerow([sid, c, p.as_posix(), repr(lo), repr(hi)])


def marker_contrast(bag, params, marker_cells, class_id: int = 1, grid_shape=None) -> tuple[float, float]:
    """Mean normalized attention of ``class_id`` over marker cells and over the other bag cells."""
    attn = attention_scores(bag, params)[class_id]
    coords = [tuple(c) for c in bag.coords]
    if grid_shape is None:
        grid_shape = tuple(np.max(np.asarray(coords), axis=0) + 1)
    amap = AttentionMap.from_scores(bag.slide_id, class_id, coords, attn, grid_shape)
    markers = {tuple(m) for m in marker_cells}
    inside = [c for c in coords if c in markers]
    outside = [c for c in coords if c not in markers]
    return amap.mean_over(inside), amap.mean_over(outside)
