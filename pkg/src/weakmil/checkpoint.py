"""Binary parameter container shared by encoder (``MOCO``) and MIL (``WMIL``) checkpoints.

Layout, all little-endian::

    magic      4 bytes
    version    u16
    records    repeated until EOF:
        name_len   u16
        name       utf-8 bytes
        rank       u8
        dims       u32 * rank
        payload    f64 * prod(dims)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import ParamSet
from .exceptions import FormatError

VERSION = 1


def dumps_params(magic: bytes, params) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    parts = [magic, struct.pack("<H", VERSION)]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_params(magic: bytes, blob: bytes) -> ParamSet:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated while reading {what}", pos)
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    got = bytes(take(4, "magic"))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    params = ParamSet()
    while pos < len(view):
        (n,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = bytes(take(n, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not utf-8", start) from exc
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}", start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64))
        payload = take(8 * count, f"payload of {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return params


def save_params(path, magic: bytes, params) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps_params(magic, params))


def load_params(path, magic: bytes) -> ParamSet:
    return loads_params(magic, Path(path).read_bytes())
