"""Pose data model, heatmap rendering/decoding, soft-argmax and PCK."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DELTA_MIN = 1e-6


class DegenerateBoneError(ValueError):
    def __init__(self, bone: int, name: str = ""):
        super().__init__(f"degenerate bone {bone} {name}".rstrip())
        self.bone = bone


@dataclass
class Skeleton:
    names: list[str]
    bones: list[tuple[int, int]]
    parents: list[int]
    groups: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.bones = [tuple(int(i) for i in b) for b in self.bones]
        self.parents = [int(p) for p in self.parents]
        k, nb = len(self.names), len(self.bones)
        if len(self.parents) != nb:
            raise ValueError("parent map must have one entry per bone")
        for l, (a, b) in enumerate(self.bones):
            if not (0 <= a < k and 0 <= b < k) or a == b:
                raise ValueError(f"bone {l} has invalid endpoints {(a, b)}")
        roots = [l for l, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ValueError(f"parent map needs exactly one root bone, found {roots}")
        self.order  # raises on cycles

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def L(self) -> int:
        return len(self.bones)

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    @property
    def order(self) -> list[int]:
        """Bones root-first, each after its parent."""
        children: dict[int, list[int]] = {}
        for l, p in enumerate(self.parents):
            children.setdefault(p, []).append(l)
        out, frontier = [], [self.root]
        while frontier:
            l = frontier.pop(0)
            out.append(l)
            frontier.extend(children.get(l, []))
        if len(out) != self.L:
            raise ValueError("parent map is not a tree over bones")
        return out

    def bone_name(self, l: int) -> str:
        a, b = self.bones[l]
        return f"{self.names[b]}->{self.names[a]}"

    def to_dict(self) -> dict:
        return {"names": self.names, "bones": [list(b) for b in self.bones],
                "parents": self.parents, "groups": self.groups}

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(d["names"], [tuple(b) for b in d["bones"]], d["parents"], d.get("groups", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Skeleton":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_skeleton() -> Skeleton:
    # "l_" is the keypoint on the image-left side.
    names = ["head", "l_sho", "r_sho", "l_elb", "r_elb", "l_wri", "r_wri",
             "l_hip", "r_hip", "l_knee", "r_knee", "l_ank", "r_ank"]
    # (a, b): orientation points from keypoint b towards keypoint a
    bones = [(8, 7),              # 0 pelvis, root
             (1, 7), (2, 8),      # 1-2 torso sides
             (0, 1),              # 3 head
             (3, 1), (5, 3),      # 4-5 left arm
             (4, 2), (6, 4),      # 6-7 right arm
             (9, 7), (11, 9),     # 8-9 left leg
             (10, 8), (12, 10)]   # 10-11 right leg
    parents = [-1, 0, 0, 1, 1, 4, 2, 6, 0, 8, 0, 10]
    groups = {"Sld.": [1, 2], "Elb.": [3, 4], "Wrist": [5, 6],
              "Hip": [7, 8], "Knee": [9, 10], "Ankle": [11, 12]}
    return Skeleton(names, bones, parents, groups)


@dataclass(frozen=True)
class HeatmapFrame:
    """Heatmap grid -> image pixels: ``img = stride * grid + offset``."""
    height: int = 16
    width: int = 16
    stride: float = 4.0

    @property
    def offset(self) -> float:
        return (self.stride - 1.0) / 2.0

    def to_image(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords) * self.stride + self.offset

    def to_grid(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords) - self.offset) / self.stride


# -- rendering / decoding ---------------------------------------------------
def render_gaussian(coords: np.ndarray, sigma: float, height: int, width: int,
                    visible: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Peak-normalised Gaussians at ``coords`` (..., K, 2) given as (x, y) grid points.

    Returns ``(maps (..., K, H, W), in_frame (..., K))``; off-grid or invisible
    keypoints get an all-zero channel and ``in_frame=False``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    coords = np.asarray(coords, dtype=np.float64)
    if not np.isfinite(coords).all():
        raise ValueError("pose contains non-finite coordinates")
    x, y = coords[..., 0], coords[..., 1]
    in_frame = (x >= -0.5) & (x < width - 0.5) & (y >= -0.5) & (y < height - 0.5)
    if visible is not None:
        in_frame &= np.asarray(visible, dtype=bool)
    gx = np.exp(-(np.arange(width) - x[..., None]) ** 2 / (2 * sigma ** 2))
    gy = np.exp(-(np.arange(height) - y[..., None]) ** 2 / (2 * sigma ** 2))
    maps = gy[..., :, None] * gx[..., None, :]
    maps *= in_frame[..., None, None]
    return maps, in_frame


def argmax_decode(maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per channel (x, y) of the maximum and its value; ties -> first in row-major order."""
    maps = np.asarray(maps)
    h, w = maps.shape[-2:]
    flat = maps.reshape(*maps.shape[:-2], h * w)
    idx = flat.argmax(axis=-1)
    conf = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    coords = np.stack([idx % w, idx // w], axis=-1).astype(np.float64)
    return coords, conf


def refine_quarter(maps: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Shift integer argmax coordinates a quarter pixel towards the larger neighbour."""
    maps = np.asarray(maps)
    h, w = maps.shape[-2:]
    out = coords.astype(np.float64).copy()
    flat = maps.reshape(-1, h, w)
    c = out.reshape(-1, 2)
    for i in range(flat.shape[0]):
        x, y = int(c[i, 0]), int(c[i, 1])
        m = flat[i]
        if 0 < x < w - 1:
            c[i, 0] += 0.25 * np.sign(m[y, x + 1] - m[y, x - 1])
        if 0 < y < h - 1:
            c[i, 1] += 0.25 * np.sign(m[y + 1, x] - m[y - 1, x])
    return out


def soft_argmax(maps: Tensor, beta: float = 4.0) -> Tensor:
    """Separable spatial expectation of (..., K, H, W) heatmaps -> (..., K, 2) as (x, y).

    Each axis marginal is turned into a distribution with softmax(beta * marginal).
    """
    maps = ad.as_tensor(maps)
    h, w = maps.shape[-2:]
    px = ad.softmax(maps.sum(axis=-2) * beta, axis=-1)
    py = ad.softmax(maps.sum(axis=-1) * beta, axis=-1)
    x = (px * np.arange(w, dtype=np.float64)).sum(axis=-1, keepdims=True)
    y = (py * np.arange(h, dtype=np.float64)).sum(axis=-1, keepdims=True)
    return ad.concat([x, y], axis=-1)


# -- orientations -----------------------------------------------------------
def bone_lengths(coords: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    coords = np.asarray(coords)
    a = [b[0] for b in skeleton.bones]
    b = [b[1] for b in skeleton.bones]
    return np.linalg.norm(coords[..., a, :] - coords[..., b, :], axis=-1)


def pose_to_orientations(coords, skeleton: Skeleton, delta_min: float = DELTA_MIN):
    """Unit bone vectors (u_a - u_b) / |u_a - u_b|, shape (..., L, 2).

    Accepts a Tensor (differentiable path) or an array (returns an array).
    """
    as_array = not isinstance(coords, Tensor)
    t = ad.as_tensor(coords)
    lengths = bone_lengths(t.data, skeleton)
    short = np.argwhere(lengths <= delta_min)
    if short.size:
        l = int(short[0, -1])
        raise DegenerateBoneError(l, skeleton.bone_name(l))
    a = np.array([b[0] for b in skeleton.bones])
    b = np.array([b[1] for b in skeleton.bones])
    diff = t[..., a, :] - t[..., b, :]
    theta = diff / ad.l2norm(diff, axis=-1, keepdims=True)
    return theta.data if as_array else theta


# -- metric -----------------------------------------------------------------
def pck(pred: np.ndarray, gt: np.ndarray, image_size: float, fraction: float = 0.05,
        visible: np.ndarray | None = None, skeleton: Skeleton | None = None) -> dict:
    """Fraction of visible keypoints within ``fraction * image_size`` pixels.

    Returns per-keypoint ratios, per-group ratios (when the skeleton defines
    groups) and ``avg`` over all grouped keypoints (all keypoints if no groups).
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty evaluation set")
    vis = np.ones(gt.shape[:-1], bool) if visible is None else np.asarray(visible, bool)
    correct = (np.linalg.norm(pred - gt, axis=-1) <= fraction * image_size) & vis
    count = vis.sum(axis=0)
    per_kp = np.where(count > 0, correct.sum(axis=0) / np.maximum(count, 1), np.nan)
    out = {"per_keypoint": per_kp, "groups": {}}
    used = np.arange(gt.shape[-2])
    if skeleton is not None and skeleton.groups:
        for g, idx in skeleton.groups.items():
            out["groups"][g] = float(correct[:, idx].sum() / max(vis[:, idx].sum(), 1))
        used = np.array(sorted({i for idx in skeleton.groups.values() for i in idx}))
    out["avg"] = float(correct[:, used].sum() / max(vis[:, used].sum(), 1))
    return out


# -- pose files -------------------------------------------------------------
@dataclass
class PoseRecord:
    image_id: str
    coords: np.ndarray
    visible: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id,
                           "coords": [[float(x), float(y)] for x, y in self.coords],
                           "visible": [bool(v) for v in self.visible]})


def write_poses(path: str | Path, records: Iterable[PoseRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_poses(path: str | Path) -> list[PoseRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        coords = np.asarray(d["coords"], dtype=np.float64)
        vis = np.asarray(d.get("visible", [True] * len(coords)), dtype=bool)
        out.append(PoseRecord(str(d["image_id"]), coords, vis))
    return out


def stack_poses(records: Sequence[PoseRecord]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([r.coords for r in records]), np.stack([r.visible for r in records]))
