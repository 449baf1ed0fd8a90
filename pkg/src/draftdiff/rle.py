"""Run-length encoding for binary masks (row-major, first run counts zeros)."""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> dict:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"rle.encode: mask must be 2-d, got shape {m.shape}")
    flat = (m.reshape(-1) != 0).astype(np.uint8)
    counts = []
    run_val = 0
    run_len = 0
    for v in flat:
        if v == run_val:
            run_len += 1
        else:
            counts.append(run_len)
            run_val = v
            run_len = 1
    counts.append(run_len)
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": counts}


def decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"rle.decode: counts sum {total} != {h}*{w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    val = 0
    for c in counts:
        if val:
            flat[pos : pos + c] = 1
        pos += c
        val ^= 1
    return flat.reshape(h, w)
