"""Tissue segmentation and QC-filtered patch tiling.

Slides are segmented by an Otsu threshold on 8-bit luminance, tiled into
non-overlapping square patches from the origin (partial edge tiles are
discarded), and each tile is screened by three rules, checked in this order:

``near_white``
    mean RGB intensity at or above ``white_mean_center - white_mean_halfwidth``
``low_channel_median``
    any per-channel median below ``min_channel_median``
``low_tissue``
    tissue-mask fraction below ``min_tissue_fraction``
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DegenerateHistogramError, DimensionError
from .imaging import load_rgb, luminance, save_png

NEAR_WHITE = "near_white"
LOW_CHANNEL_MEDIAN = "low_channel_median"
LOW_TISSUE = "low_tissue"


@dataclass(frozen=True)
class QcThresholds:
    min_channel_median: int = 20
    white_mean_center: int = 245
    white_mean_halfwidth: int = 10
    min_tissue_fraction: float = 0.5

    def __post_init__(self):
        for name in ("min_channel_median", "white_mean_center", "white_mean_halfwidth"):
            if not 0 <= getattr(self, name) <= 255:
                raise ConfigurationError(f"{name} must be an 8-bit value")
        if not 0.0 <= self.min_tissue_fraction <= 1.0:
            raise ConfigurationError("min_tissue_fraction must lie in [0, 1]")

    @property
    def white_floor(self) -> int:
        return self.white_mean_center - self.white_mean_halfwidth


@dataclass(frozen=True)
class MicronsConfig:
    patch_microns: float = 360.0
    microns_per_pixel: float = 0.25

    def __post_init__(self):
        if self.patch_microns <= 0 or self.microns_per_pixel <= 0:
            raise ConfigurationError("patch_microns and microns_per_pixel must be positive")


@dataclass(frozen=True)
class PatchRecord:
    row: int
    col: int
    kept: bool
    drop_reason: str = ""


@dataclass
class PatchGrid:
    slide_id: str
    patch_px_source: int
    output_px: int = 224
    records: list[PatchRecord] = field(default_factory=list)

    def kept(self) -> list[PatchRecord]:
        return [r for r in self.records if r.kept]

    def kept_coords(self) -> list[tuple[int, int]]:
        return [(r.row, r.col) for r in self.records if r.kept]


def gray_histogram(rgb: np.ndarray) -> np.ndarray:
    return np.bincount(luminance(rgb).ravel(), minlength=256).astype(np.int64)


def otsu_threshold(hist) -> int:
    """Split ``[0..t]`` vs ``[t+1..255]`` maximizing between-class variance.

    The variance is compared exactly in integer arithmetic
    (``(N*S0 - n0*S)^2 / (n0*n1)`` is proportional to it), so equal splits
    tie exactly.  When the maximum is attained on a run of consecutive
    thresholds, the midpoint of the first such run (rounded down) is returned.
    """
    hist = [int(v) for v in np.asarray(hist).ravel()]
    if len(hist) != 256 or min(hist) < 0:
        raise ValueError("histogram must have 256 nonnegative bins")
    total = sum(hist)
    if total == 0:
        raise DegenerateHistogramError("histogram is empty")
    if sum(1 for v in hist if v) == 1:
        raise DegenerateHistogramError("all histogram mass lies in a single bin")
    s_total = sum(i * v for i, v in enumerate(hist))

    best_num, best_den = -1, 1
    run_lo = run_hi = -1
    n0 = s0 = 0
    for t in range(255):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            num, den = 0, 1
        else:
            num, den = (total * s0 - n0 * s_total) ** 2, n0 * n1
        cmp = num * best_den - best_num * den
        if cmp > 0:
            best_num, best_den = num, den
            run_lo = run_hi = t
        elif cmp == 0 and run_hi == t - 1:
            # extends the current run only while contiguous; later equal runs are ignored
            run_hi = t
    return (run_lo + run_hi) // 2


def tissue_mask(rgb: np.ndarray, t: int) -> np.ndarray:
    """Tissue is darker than the background: ``luminance < t``."""
    return luminance(rgb) < t


def segment(rgb: np.ndarray) -> np.ndarray:
    """Otsu tissue mask; a degenerate histogram yields an all-background mask."""
    try:
        t = otsu_threshold(gray_histogram(rgb))
    except DegenerateHistogramError:
        return np.zeros(rgb.shape[:2], dtype=bool)
    return tissue_mask(rgb, t)


def patch_side_pixels(cfg: MicronsConfig) -> int:
    return int(math.floor(cfg.patch_microns / cfg.microns_per_pixel + 0.5))


def qc_tile(tile: np.ndarray, mask_tile: np.ndarray, qc: QcThresholds) -> str:
    """Drop reason for one tile, or ``""`` when it is kept."""
    if tile.mean() >= qc.white_floor:
        return NEAR_WHITE
    medians = np.median(tile.reshape(-1, tile.shape[-1]), axis=0)
    if np.any(medians < qc.min_channel_median):
        return LOW_CHANNEL_MEDIAN
    if mask_tile.mean() < qc.min_tissue_fraction:
        return LOW_TISSUE
    return ""


def grid_patches(
    slide_id: str,
    rgb: np.ndarray,
    mask: np.ndarray,
    patch_px_source: int,
    qc: QcThresholds = QcThresholds(),
    output_px: int = 224,
) -> PatchGrid:
    h, w = rgb.shape[:2]
    if patch_px_source > min(h, w):
        raise DimensionError(f"patch side {patch_px_source} exceeds slide size {h}x{w}")
    p = patch_px_source
    grid = PatchGrid(slide_id, p, output_px)
    for r in range(h // p):
        for c in range(w // p):
            reason = qc_tile(rgb[r * p : (r + 1) * p, c * p : (c + 1) * p],
                             mask[r * p : (r + 1) * p, c * p : (c + 1) * p], qc)
            grid.records.append(PatchRecord(r, c, not reason, reason))
    return grid


def resize_patch(patch: np.ndarray, output_px: int = 224) -> np.ndarray:
    """Bilinear resize of a square patch (half-pixel centres, edge clamped).

    Same-size input is returned unchanged; output keeps the input dtype,
    with integer types rounded half up.
    """
    patch = np.asarray(patch)
    if patch.shape[0] != patch.shape[1]:
        raise DimensionError(f"resize_patch needs a square patch, got {patch.shape[:2]}")
    n = patch.shape[0]
    if n == output_px:
        return patch.copy()
    src = (np.arange(output_px) + 0.5) * (n / output_px) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    f = src - i0
    x = patch.astype(np.float64)
    if x.ndim == 2:
        x = x[..., None]
    rows = x[i0] * (1 - f)[:, None, None] + x[i1] * f[:, None, None]
    out = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i1] * f[None, :, None]
    if patch.ndim == 2:
        out = out[..., 0]
    if np.issubdtype(patch.dtype, np.integer):
        info = np.iinfo(patch.dtype)
        return np.clip(np.floor(out + 0.5), info.min, info.max).astype(patch.dtype)
    return out.astype(patch.dtype)


def extract_patch(rgb: np.ndarray, grid: PatchGrid, row: int, col: int) -> np.ndarray:
    p = grid.patch_px_source
    return resize_patch(rgb[row * p : (row + 1) * p, col * p : (col + 1) * p], grid.output_px)


def kept_patches(rgb: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Resized kept patches stacked in row-major grid order, ``(N, px, px, 3)`` uint8."""
    rec = grid.kept()
    out = np.empty((len(rec), grid.output_px, grid.output_px, 3), dtype=np.uint8)
    for i, r in enumerate(rec):
        out[i] = extract_patch(rgb, grid, r.row, r.col)
    return out


def preprocess_slide(slide_id: str, rgb: np.ndarray, patch_px_source: int,
                     qc: QcThresholds = QcThresholds(), output_px: int = 224) -> PatchGrid:
    return grid_patches(slide_id, rgb, segment(rgb), patch_px_source, qc, output_px)


def preprocess_manifest(manifest, patch_px_source: int, qc: QcThresholds = QcThresholds(),
                        output_px: int = 224, threads: int = 1) -> list[PatchGrid]:
    def one(rec):
        return preprocess_slide(rec.slide_id, load_rgb(rec.path), patch_px_source, qc, output_px)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, manifest.rows))
    return [one(r) for r in manifest.rows]


GRID_HEADER = ["slide_id", "row", "col", "kept", "drop_reason"]


def write_grids(grids, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for g in grids:
            for r in g.records:
                w.writerow([g.slide_id, r.row, r.col, int(r.kept), r.drop_reason])


def read_grids(path, patch_px_source: int, output_px: int = 224) -> dict[str, PatchGrid]:
    grids: dict[str, PatchGrid] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != GRID_HEADER:
            raise ValueError(f"{path}: expected header {GRID_HEADER}, got {reader.fieldnames}")
        for rec in reader:
            g = grids.setdefault(rec["slide_id"], PatchGrid(rec["slide_id"], patch_px_source, output_px))
            g.records.append(
                PatchRecord(int(rec["row"]), int(rec["col"]), rec["kept"] == "1", rec["drop_reason"])
            )
    return grids


def export_patches(rgb: np.ndarray, grid: PatchGrid, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for r in grid.kept():
        path = out_dir / f"{grid.slide_id}_{r.row}_{r.col}.png"
        save_png(path, extract_patch(rgb, grid, r.row, r.col))
        paths.append(path)
    return paths
