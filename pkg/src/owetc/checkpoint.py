"""Deterministic, self-describing tensor container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
a UTF-8 JSON header, then the raw little-endian tensor bytes in header
order. Writing the same tensors and metadata twice yields identical bytes,
which the stage manifest relies on.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Mapping

import numpy as np
import torch

MAGIC = b"OWETCKPT"
VERSION = 1


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def dumps(tensors: Mapping[str, object], meta: Mapping | None = None) -> bytes:
    arrays = {name: _as_array(t) for name, t in tensors.items()}
    index = []
    offset = 0
    for name, arr in arrays.items():
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"meta": dict(meta or {}), "tensors": index}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header]
    parts.extend(arr.tobytes() for arr in arrays.values())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20 : 20 + header_len])
    base = 20 + header_len
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]


def save(path: str | os.PathLike, tensors: Mapping[str, object], meta: Mapping | None = None) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    blob = dumps(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
