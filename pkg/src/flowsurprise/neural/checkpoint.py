"""Checkpoint container.

Byte layout::

    b"FSCKPT01"                 8-byte magic
    uint64 little-endian        length N of the JSON header in bytes
    N bytes                     UTF-8 JSON header
    float32 little-endian data  tensors concatenated in header order

The header carries ``tensors``: a list of ``{"name", "shape"}`` entries in
storage order, plus free-form metadata (model kind, configs, seed, step).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import CorruptCheckpoint

MAGIC = b"FSCKPT01"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    names = list(tensors)
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns float64 copies of the stored float32 tensors and the header."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    offset = 16 + n
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise CorruptCheckpoint(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CorruptCheckpoint(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors, header
