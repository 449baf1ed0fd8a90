"""Checkpoint container: JSON header + little-endian raw float32 blobs.

Layout: 8-byte little-endian uint64 header length, UTF-8 JSON header, then a
data section of concatenated f32 blobs. The header lists every parameter with
its name, shape, and byte offset into the data section, plus an arbitrary
`config` dict. Round-trips are byte-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = "draftdiff-checkpoint-v1"


def save(path, params: dict[str, np.ndarray], config: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {"format": MAGIC, "params": entries, "config": config or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"checkpoint {path}: truncated")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"checkpoint {path}: unrecognized format {header.get('format')!r}")
    data = raw[8 + hlen :]
    params = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        params[e["name"]] = arr.reshape(shape).copy()
    return params, header.get("config", {})
