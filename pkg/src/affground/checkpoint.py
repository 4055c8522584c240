"""Versioned binary checkpoint container.

Layout: 8-byte magic, little-endian u64 header length, canonical JSON
header (sorted keys), then the raw float64 little-endian tensor blobs in
the header's (sorted-name) order. Writing the same state twice produces
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AFGCKPT1"


def save_checkpoint(path: Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    names = sorted(tensors)
    header = {
        "format": 1,
        "meta": meta,
        "tensors": [{"name": n, "shape": list(np.asarray(tensors[n]).shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (magic {raw[:8]!r})")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format") != 1:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')}")
    tensors: dict[str, np.ndarray] = {}
    offset = 16 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += count * 8
    return header["meta"], tensors
