"""Versioned binary checkpoint container.

Layout (little-endian throughout):

    bytes 0..7    magic  b"EGCKPT01"
    bytes 8..11   uint32 length of the JSON index
    index         UTF-8 JSON: {"version": 1, "meta": {...},
                   "tensors": {name: {"dtype", "shape", "offset", "nbytes"}}}
    payload       raw tensor bytes, concatenated in index order

Offsets are relative to the start of the payload. Supported dtypes:
f32, f64, i8, u8, i32, i64. The same container holds model weights,
codebooks and quantized optimizer state (codes + scales + step counter
in meta).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"EGCKPT01"
FORMAT_VERSION = 1

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i8": np.dtype("<i1"),
    "u8": np.dtype("<u1"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def _dtype_name(arr: np.ndarray) -> str:
    key = arr.dtype.newbyteorder("<")
    if key not in _DTYPE_NAMES:
        raise ParseError(f"unsupported checkpoint dtype {arr.dtype}")
    return _DTYPE_NAMES[key]


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index: dict = {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": {}}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index["tensors"][name] = {
            "dtype": _dtype_name(arr),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    index_bytes = json.dumps(index, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(index_bytes)))
        fh.write(index_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic)")
    (index_len,) = struct.unpack("<I", raw[8:12])
    index = json.loads(raw[12 : 12 + index_len].decode("utf-8"))
    if index.get("version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {index.get('version')}")
    payload = raw[12 + index_len :]
    tensors = {}
    for name, entry in index["tensors"].items():
        dt = _DTYPES[entry["dtype"]]
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dt)
        tensors[name] = arr.reshape(entry["shape"]).copy()
    return tensors, index["meta"]


def checkpoint_id(path) -> str:
    """Short content hash used in health reports and job provenance."""
    h = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return h[:12]
