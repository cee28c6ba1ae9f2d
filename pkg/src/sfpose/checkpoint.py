"""Flat binary container of named float64 arrays.

Layout: 8-byte magic, little-endian uint64 header length, JSON header
``{"arrays": {name: {"shape", "offset"}}, "meta": {...}}``, then the raw
little-endian float64 payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SFPCKv01"


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = {}
    offset = 0
    for name in arrays:
        a = np.asarray(arrays[name], dtype="<f8")
        entries[name] = {"shape": list(a.shape), "offset": offset}
        offset += a.size * 8
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in arrays:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    out = {}
    for name, ent in header["arrays"].items():
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = base + ent["offset"]
        out[name] = np.frombuffer(raw[start:start + 8 * n], dtype="<f8").reshape(ent["shape"]).astype(np.float64)
    return out, header.get("meta", {})
