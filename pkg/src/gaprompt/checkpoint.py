"""Flat binary container for named parameter tensors.

Layout (all integers little-endian)::

    8 bytes   magic  b"GAPCKPT\\0"
    4 bytes   u32    format version
    8 bytes   u64    header length H
    H bytes   JSON   {"version", "meta", "tensors": [{name, dtype, shape, offset, nbytes}]}
    ...       payload, row-major little-endian arrays at the listed offsets

The header is serialised with sorted keys, so equal inputs give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InvalidData

MAGIC = b"GAPCKPT\0"
VERSION = 1
_DTYPES = {"<f8": np.float64, "<f4": np.float32, "<i8": np.int64}


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in tensors:
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _DTYPES:
            raise InvalidData(f"unsupported dtype {arr.dtype} for {name}")
        blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise InvalidData(f"{path}: not a gaprompt checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise InvalidData(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidData(f"{path}: corrupt header ({exc})") from None
    base = 20 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise InvalidData(f"{path}: truncated payload for {e['name']}")
        out[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return out, header.get("meta", {})
