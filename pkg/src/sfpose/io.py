"""Raster files, hashing and run manifests."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    elif img.ndim == 3 and img.shape[2] == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: only 8-bit P5/P6 rasters are supported")
    data = np.frombuffer(raw[pos + 1:], dtype=np.uint8)
    return data.reshape(h, w) if magic == b"P5" else data.reshape(h, w, 3)


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def tree_hashes(root: str | Path, exclude: tuple[str, ...] = ("manifest.json",)) -> dict[str, str]:
    root = Path(root)
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in exclude}


def write_manifest(out_dir: str | Path, command: str, config: dict, seed: int,
                   inputs: dict, timings: dict) -> dict:
    """One manifest per output directory; output hashes cover every other file in it."""
    out_dir = Path(out_dir)
    manifest = {"command": command, "config_hash": config_hash(config), "config": config,
                "seed": seed, "inputs": {k: str(v) for k, v in inputs.items()},
                "outputs": tree_hashes(out_dir), "timings": timings}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_default))
    return manifest
