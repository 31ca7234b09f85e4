"""Per-slide feature bags and their binary store.

A bag holds one encoder feature row per kept patch, in row-major grid
order.  On disk (``WBAG``, little-endian)::

    magic     4 bytes  b"WBAG"
    version   u16
    id_len    u16, then slide_id utf-8 bytes
    label     u8
    N, D      u32, u32
    coords    N * (row u32, col u32)
    matrix    N * D f32, row-major
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, EmptyBagError, FormatError
from .imaging import load_rgb
from .preprocess import kept_patches
from .ssl.encoder import encode_numpy, prepare_input

BAG_MAGIC = b"WBAG"
BAG_VERSION = 1
INDEX_HEADER = ["slide_id", "label", "n_patches", "bag_path"]


@dataclass
class FeatureBag:
    slide_id: str
    label: int
    features: np.ndarray
    coords: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = [(int(r), int(c)) for r, c in self.coords]
        if self.features.ndim != 2:
            raise DimensionError(f"bag {self.slide_id}: features must be 2-D, got {self.features.shape}")
        if len(self.coords) != len(self.features):
            raise DimensionError(
                f"bag {self.slide_id}: {len(self.coords)} coords for {len(self.features)} rows"
            )
        if len(set(self.coords)) != len(self.coords):
            raise ValueError(f"bag {self.slide_id}: duplicate patch coordinates")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def extract_features(query_params, grid, rgb, label: int, input_px: int = 32,
                     chunk: int = 256) -> FeatureBag:
    """Encode every kept patch of one slide with the query encoder (no augmentation)."""
    coords = grid.kept_coords()
    if not coords:
        raise EmptyBagError(f"slide {grid.slide_id} has no kept patches")
    patches = prepare_input(kept_patches(rgb, grid), input_px)
    feats = encode_numpy(query_params, patches, chunk=chunk)
    return FeatureBag(grid.slide_id, int(label), feats, coords)


def extract_manifest(query_params, manifest, grids, input_px: int = 32,
                     threads: int = 1) -> list[FeatureBag]:
    """Bags for every slide of ``manifest`` in manifest order."""
    def one(rec):
        return extract_features(query_params, grids[rec.slide_id], load_rgb(rec.path), rec.label, input_px)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, manifest.rows))
    return [one(r) for r in manifest.rows]


def dumps_bag(bag: FeatureBag) -> bytes:
    sid = bag.slide_id.encode("utf-8")
    if len(sid) > 0xFFFF:
        raise ValueError("slide_id too long")
    if bag.label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {bag.label}")
    n, d = bag.features.shape
    coords = np.asarray(bag.coords, dtype="<u4").reshape(n, 2)
    return b"".join([
        BAG_MAGIC,
        struct.pack("<HH", BAG_VERSION, len(sid)),
        sid,
        struct.pack("<BII", bag.label, n, d),
        coords.tobytes(),
        np.ascontiguousarray(bag.features, dtype="<f4").tobytes(),
    ])


def loads_bag(blob: bytes) -> FeatureBag:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated while reading {what}", pos)
        out = blob[pos : pos + n]
        pos += n
        return out

    magic = take(4, "magic")
    if magic != BAG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BAG_MAGIC!r}", 0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != BAG_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (id_len,) = struct.unpack("<H", take(2, "slide_id length"))
    start = pos
    try:
        slide_id = take(id_len, "slide_id").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("slide_id is not utf-8", start) from exc
    label_at = pos
    label, n, d = struct.unpack("<BII", take(9, "label and shape"))
    if label not in (0, 1):
        raise FormatError(f"label byte {label} is not 0 or 1", label_at)
    coords = np.frombuffer(take(8 * n, "coords"), dtype="<u4").reshape(n, 2)
    matrix = np.frombuffer(take(4 * n * d, "feature matrix"), dtype="<f4").reshape(n, d)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes", pos)
    return FeatureBag(slide_id, label, matrix.astype(np.float64), [tuple(c) for c in coords.tolist()])


def save_bag(bag: FeatureBag, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps_bag(bag))


def load_bag(path) -> FeatureBag:
    return loads_bag(Path(path).read_bytes())


def bag_filename(slide_id: str) -> str:
    return f"{slide_id}.wbag"


def write_bag_store(bags, out_dir) -> Path:
    """Write one ``.wbag`` per bag plus ``index.csv``; paths in the index are relative to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / "index.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_HEADER)
        for bag in bags:
            name = bag_filename(bag.slide_id)
            save_bag(bag, out_dir / name)
            w.writerow([bag.slide_id, bag.label, len(bag), name])
    return index


def read_bag_store(index_path) -> list[FeatureBag]:
    index_path = Path(index_path)
    with open(index_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INDEX_HEADER:
            raise ValueError(f"{index_path}: expected header {INDEX_HEADER}, got {reader.fieldnames}")
        rows = list(reader)
    bags = []
    for row in rows:
        bag = load_bag(index_path.parent / row["bag_path"])
        if bag.slide_id != row["slide_id"] or len(bag) != int(row["n_patches"]):
            raise FormatError(f"index row for {row['slide_id']} disagrees with {row['bag_path']}", 0)
        bags.append(bag)
    return bags
