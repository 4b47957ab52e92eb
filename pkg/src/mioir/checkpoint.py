"""Binary checkpoint container.

Layout::

    b"MIO1"                  magic
    uint32 LE                format version
    uint64 LE                header length in bytes
    header                   UTF-8 JSON: {"meta": ..., "tensors": [{"name", "shape"}, ...]}
    payload                  float32 LE tensors, in header order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MIO1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    directory = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    header = json.dumps({"meta": meta or {}, "tensors": directory}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header]
    for v in tensors.values():
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt header ({e})") from None
    offset = 16 + hlen
    sizes = [int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"]]
    expected = offset + 4 * sum(sizes)
    if len(blob) != expected:
        raise CheckpointError(f"{source}: payload is {len(blob) - offset} bytes, expected {expected - offset} (truncated or corrupt)")
    tensors = {}
    for entry, n in zip(header["tensors"], sizes):
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
        offset += 4 * n
    return tensors, header["meta"]


def write(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)
    return path


def read(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    return loads(path.read_bytes(), str(path))
