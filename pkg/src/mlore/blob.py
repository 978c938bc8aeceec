"""Named-tensor blob: 8-byte magic, u64 header length, JSON manifest, float32 LE payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MLORECK1"


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if raw[:8] != MAGIC:
        raise ValueError("not a checkpoint blob (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, header["meta"]


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
