"""Binary checkpoint container with per-tensor CRC32 integrity checks.

Layout: magic 'TFCK', u32 format version, u64 header length, UTF-8 JSON
header (metadata + tensor table with dtype tag / shape / byte length /
crc32), then the raw little-endian tensor blobs in table order.  Round
trips are bit-exact; float32 storage is opt-in via ``cast_f32``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"TFCK"
VERSION = 1

_DTYPES = {"f8": "<f8", "f4": "<f4"}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict, cast_f32: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if cast_f32:
            arr = arr.astype(np.float32)
        if arr.dtype == np.float64:
            tag = "f8"
        elif arr.dtype == np.float32:
            tag = "f4"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        blob = np.ascontiguousarray(arr).astype(_DTYPES[tag]).tobytes()
        table.append({
            "name": name,
            "dtype": tag,
            "shape": list(arr.shape),
            "nbytes": len(blob),
            "crc32": zlib.crc32(blob),
        })
        blobs.append(blob)
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            blob = f.read(entry["nbytes"])
            if zlib.crc32(blob) != entry["crc32"]:
                raise CheckpointError(f"{path}: checksum failure for tensor {entry['name']!r}")
            arr = np.frombuffer(blob, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
            tensors[entry["name"]] = arr.copy()
    return tensors, header["meta"]
