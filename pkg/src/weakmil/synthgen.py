"""Synthetic labeled slide corpus.

Each slide is a near-white canvas with a connected tissue region made of
whole grid cells.  Tissue carries a low-frequency blotched pink/purple
texture.  On positive slides a fixed fraction of tissue cells is replaced
by a two-tone checker marker texture, shifted toward blue.  Everything is
aligned to the patch grid so planted cells can be audited exactly.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import ConfigurationError
from .imaging import load_rgb, luminance, save_png

STROMA_RGB = np.array([226.0, 162.0, 204.0])
NUCLEI_RGB = np.array([150.0, 92.0, 162.0])
MARKER_DARK_RGB = np.array([104.0, 66.0, 170.0])
MARKER_LIGHT_RGB = np.array([200.0, 168.0, 234.0])

# pixels darker than the bottom of the near-white band count as tissue in corpus_stats
TISSUE_LUMINANCE_CUTOFF = 235
MARKER_DETECTION_THRESHOLD = 20.0
MIN_TISSUE_AREA = 0.4


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SynthSpec:
    n_slides: int = 60
    positive_fraction: float = 0.5
    slide_px: int = 2240
    patch_px: int = 224
    marker_fraction: float = 0.2
    background_intensity: int = 248
    seed: int = 0
    tissue_fraction: tuple[float, float] = (0.45, 0.7)

    def __post_init__(self):
        if self.n_slides < 0:
            raise ConfigurationError("n_slides must be nonnegative")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigurationError("positive_fraction must lie in [0, 1]")
        if self.patch_px <= 0 or self.slide_px % self.patch_px:
            raise ConfigurationError(
                f"slide_px ({self.slide_px}) must be a multiple of patch_px ({self.patch_px})"
            )
        if not 0.0 < self.marker_fraction <= 1.0:
            raise ConfigurationError("marker_fraction must lie in (0, 1]")
        if not 5 <= self.background_intensity <= 250:
            raise ConfigurationError("background_intensity must leave room for +-5 noise")
        lo, hi = self.tissue_fraction
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError("tissue_fraction must be an increasing pair in (0, 1]")

    @property
    def grid(self) -> int:
        return self.slide_px // self.patch_px

    @property
    def checker_px(self) -> int:
        return max(1, self.patch_px // 16)


@dataclass
class SlideRecord:
    slide_id: str
    path: Path
    label: int
    marker_cells: list[tuple[int, int]] = field(default_factory=list)
    tissue_cells: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class SlideManifest:
    rows: list[SlideRecord]
    csv_path: Path | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def by_id(self) -> dict[str, SlideRecord]:
        return {r.slide_id: r for r in self.rows}

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=np.int64)

    def subset(self, slide_ids) -> "SlideManifest":
        index = self.by_id()
        return SlideManifest([index[s] for s in slide_ids], self.csv_path)


def slide_id_for(index: int) -> str:
    return f"slide_{index:03d}"


def _grow_region(rng: np.random.Generator, grid: int, n_cells: int) -> np.ndarray:
    """Connected set of ``n_cells`` grid cells grown from a random seed cell."""
    mask = np.zeros((grid, grid), dtype=bool)
    lo, hi = grid // 4, grid - grid // 4
    start = (int(rng.integers(lo, max(hi, lo + 1))), int(rng.integers(lo, max(hi, lo + 1))))
    mask[start] = True
    frontier = {start}
    count = 1

    def neighbours(r, c):
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < grid and 0 <= cc < grid:
                yield rr, cc

    while count < n_cells:
        candidates = sorted({n for cell in frontier for n in neighbours(*cell) if not mask[n]})
        pick = candidates[int(rng.integers(len(candidates)))]
        mask[pick] = True
        frontier.add(pick)
        count += 1
        frontier = {cell for cell in frontier if any(not mask[n] for n in neighbours(*cell))}
    return mask


def checker_sign(size: int, checker_px: int) -> np.ndarray:
    idx = np.arange(size) // checker_px
    return np.where((idx[:, None] + idx[None, :]) % 2 == 0, 1.0, -1.0)


def _tissue_field(rng: np.random.Generator, size: int, patch_px: int) -> np.ndarray:
    coarse = max(2, (size // patch_px) * 3)
    field_ = rng.uniform(0.0, 1.0, size=(coarse, coarse)).astype(np.float32)
    return ndimage.zoom(field_, size / coarse, order=1, mode="nearest")[:size, :size]


def _marker_texture(patch_px: int, checker_px: int) -> np.ndarray:
    sign = checker_sign(patch_px, checker_px)[..., None]
    return np.where(sign > 0, MARKER_DARK_RGB, MARKER_LIGHT_RGB).astype(np.float32)


def render_slide(spec: SynthSpec, index: int, label: int) -> tuple[np.ndarray, np.ndarray, list]:
    """Render one slide; returns (rgb uint8, tissue cell mask, marker cells)."""
    rng = np.random.default_rng([spec.seed, index])
    g, p, size = spec.grid, spec.patch_px, spec.slide_px
    lo, hi = spec.tissue_fraction
    n_tissue = max(math.ceil(MIN_TISSUE_AREA * g * g), _round_half_up(rng.uniform(lo, hi) * g * g))
    n_tissue = min(n_tissue, g * g)
    cells = _grow_region(rng, g, n_tissue)

    bg = spec.background_intensity
    img = rng.integers(bg - 5, bg + 6, size=(size, size, 3), dtype=np.uint8)
    mix = _tissue_field(rng, size, p)
    stroma, nuclei = STROMA_RGB.astype(np.float32), NUCLEI_RGB.astype(np.float32)
    tissue_list = [tuple(int(v) for v in rc) for rc in np.argwhere(cells)]
    for r, c in tissue_list:
        m = mix[r * p : (r + 1) * p, c * p : (c + 1) * p, None]
        noise = rng.integers(-4, 5, size=(p, p, 3), dtype=np.int8)
        cell = stroma + (nuclei - stroma) * m + noise
        img[r * p : (r + 1) * p, c * p : (c + 1) * p] = np.clip(np.rint(cell), 0, 255)

    markers: list[tuple[int, int]] = []
    if label == 1:
        n_marker = _round_half_up(spec.marker_fraction * len(tissue_list))
        chosen = rng.choice(len(tissue_list), size=n_marker, replace=False)
        markers = sorted(tissue_list[i] for i in chosen)
        marker = _marker_texture(p, spec.checker_px)
        for r, c in markers:
            noise = rng.integers(-4, 5, size=marker.shape, dtype=np.int8)
            img[r * p : (r + 1) * p, c * p : (c + 1) * p] = np.clip(np.rint(marker + noise), 0, 255)
    return img, cells, markers


def detect_marker_cells(rgb: np.ndarray, patch_px: int, checker_px: int | None = None,
                        threshold: float = MARKER_DETECTION_THRESHOLD) -> list[tuple[int, int]]:
    """Cells whose luminance correlates with the checker pattern above ``threshold``.

    Normal tissue texture is low frequency, so its projection onto the
    checker sign pattern is near zero.
    """
    checker_px = checker_px or max(1, patch_px // 16)
    gray = luminance(rgb).astype(np.float64)
    rows, cols = gray.shape[0] // patch_px, gray.shape[1] // patch_px
    sign = checker_sign(patch_px, checker_px)
    found = []
    for r in range(rows):
        for c in range(cols):
            cell = gray[r * patch_px : (r + 1) * patch_px, c * patch_px : (c + 1) * patch_px]
            score = abs(np.mean((cell - cell.mean()) * sign))
            if score > threshold:
                found.append((r, c))
    return found


def assign_labels(spec: SynthSpec) -> np.ndarray:
    n_pos = _round_half_up(spec.n_slides * spec.positive_fraction)
    labels = np.zeros(spec.n_slides, dtype=np.int64)
    order = np.random.default_rng([spec.seed, 2**31]).permutation(spec.n_slides)
    labels[order[:n_pos]] = 1
    return labels


def generate_corpus(spec: SynthSpec, out_dir, threads: int = 1) -> SlideManifest:
    """Write slides as PNG plus ``manifest.csv`` and ``markers.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "slides").mkdir(parents=True, exist_ok=True)
    labels = assign_labels(spec)

    def one(index: int) -> SlideRecord:
        sid = slide_id_for(index)
        rgb, cells, markers = render_slide(spec, index, int(labels[index]))
        rel = Path("slides") / f"{sid}.png"
        save_png(out_dir / rel, rgb)
        tissue = [tuple(int(v) for v in rc) for rc in np.argwhere(cells)]
        return SlideRecord(sid, out_dir / rel, int(labels[index]), markers, tissue)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, range(spec.n_slides)))
    else:
        rows = [one(i) for i in range(spec.n_slides)]
    manifest = SlideManifest(rows, out_dir / "manifest.csv")
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def write_manifest(manifest: SlideManifest, csv_path) -> None:
    csv_path = Path(csv_path)
    base = csv_path.parent
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "path", "label"])
        for r in manifest.rows:
            path = Path(r.path)
            try:
                path = path.relative_to(base)
            except ValueError:
                pass
            w.writerow([r.slide_id, path.as_posix(), r.label])
    sidecar = {
        r.slide_id: {
            "marker_cells": [list(rc) for rc in r.marker_cells],
            "tissue_cells": [list(rc) for rc in r.tissue_cells],
        }
        for r in manifest.rows
    }
    with open(csv_path.with_name(csv_path.stem + "_markers.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def read_manifest(csv_path) -> SlideManifest:
    """Load a slide manifest; relative paths resolve against the CSV's directory."""
    csv_path = Path(csv_path)
    sidecar_path = csv_path.with_name(csv_path.stem + "_markers.json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    rows = []
    with open(csv_path, newline="") as fh:
        for rec in csv.DictReader(fh):
            extra = sidecar.get(rec["slide_id"], {})
            path = Path(rec["path"])
            if not path.is_absolute():
                path = csv_path.parent / path
            rows.append(
                SlideRecord(
                    rec["slide_id"],
                    path,
                    int(rec["label"]),
                    [tuple(rc) for rc in extra.get("marker_cells", [])],
                    [tuple(rc) for rc in extra.get("tissue_cells", [])],
                )
            )
    ids = [r.slide_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate slide_id in {csv_path}")
    return SlideManifest(rows, csv_path)


def corpus_stats(manifest: SlideManifest) -> dict:
    """Per-label slide counts and the dark-pixel (tissue) fraction of each slide."""
    counts: dict[int, int] = {}
    fractions: dict[str, float] = {}
    for r in manifest:
        counts[r.label] = counts.get(r.label, 0) + 1
        if not Path(r.path).exists():
            raise FileNotFoundError(f"image for slide {r.slide_id} not found: {r.path}")
        fractions[r.slide_id] = tissue_fraction(load_rgb(r.path))
    return {"label_counts": counts, "tissue_fraction": fractions}


def tissue_fraction(rgb: np.ndarray) -> float:
    return float(np.mean(luminance(rgb) < TISSUE_LUMINANCE_CUTOFF))
