"""Run-length wire format for binary masks.

Masks travel as ``{"h": int, "w": int, "counts": [int, ...]}`` where counts
are run lengths over the row-major flattened pixels, alternating runs of 0s
and 1s and always starting with the zero run (which may be 0).  The format is
uncompressed and bit-exact, so any client language can decode it with a few
lines of code.
"""

from __future__ import annotations

import numpy as np


def encode_mask(mask: np.ndarray) -> dict:
    """Encode a binary [h, w] mask into the RLE wire dict."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    h, w = mask.shape
    flat = np.asarray(mask).reshape(-1).astype(np.uint8)
    if flat.size == 0:
        return {"h": int(h), "w": int(w), "counts": []}
    # Run boundaries wherever the value changes.
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    counts = (ends - starts).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"h": int(h), "w": int(w), "counts": [int(c) for c in counts]}


def decode_mask(payload: dict) -> np.ndarray:
    """Decode the RLE wire dict back into a binary uint8 [h, w] mask."""
    h, w = int(payload["h"]), int(payload["w"])
    counts = payload["counts"]
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"count sum {total} does not match {h}x{w}={h * w} pixels")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for c in counts:
        if c:
            flat[pos : pos + c] = value
        pos += c
        value ^= 1
    return flat.reshape(h, w)
