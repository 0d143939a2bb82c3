"""Canonical serialization helpers shared by dataset/checkpoint/report writers."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def obj_hash(obj) -> str:
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def rle_encode(values) -> list:
    """Run-length encode a flat int sequence as [value, count, value, count, ...]."""
    out: list[int] = []
    vals = np.asarray(values).ravel()
    if vals.size == 0:
        return out
    cur = int(vals[0])
    count = 1
    for v in vals[1:]:
        v = int(v)
        if v == cur:
            count += 1
        else:
            out.extend((cur, count))
            cur, count = v, 1
    out.extend((cur, count))
    return out


def rle_decode(pairs) -> np.ndarray:
    vals = []
    for i in range(0, len(pairs), 2):
        vals.extend([pairs[i]] * pairs[i + 1])
    return np.array(vals, dtype=np.int64)
