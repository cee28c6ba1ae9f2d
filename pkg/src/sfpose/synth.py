"""Stick-figure source/target domains and pose-only auxiliary sets.

Poses come from forward kinematics over the skeleton's bone tree: every bone
has an angle relative to its parent bone and a length; images are
anti-aliased limb segments and joint disks over a configurable background.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .io import read_pgm, write_pgm
from .pose import PoseRecord, Skeleton, default_skeleton, pose_to_orientations, read_poses, write_poses


class InfeasibleSpecError(RuntimeError):
    pass


@dataclass
class BoneSpec:
    angle: float        # degrees, relative to the parent bone (absolute for the root)
    spread: float       # half-width of the uniform angle range, degrees
    length: float       # pixels at unit scale
    jitter: float = 0.08  # relative length jitter


def default_bones() -> list[BoneSpec]:
    return [BoneSpec(0, 12, 10),          # pelvis
            BoneSpec(-90, 8, 17), BoneSpec(-90, 8, 17),
            BoneSpec(32, 10, 9),          # head
            BoneSpec(-135, 55, 10), BoneSpec(0, 60, 9),
            BoneSpec(135, 55, 10), BoneSpec(0, 60, 9),
            BoneSpec(100, 15, 13), BoneSpec(0, 35, 12),
            BoneSpec(80, 15, 13), BoneSpec(0, 35, 12)]


@dataclass
class DomainSpec:
    name: str = "source"
    image_size: int = 64
    bones: list[BoneSpec] = field(default_factory=default_bones)
    root_x: tuple[float, float] = (22.0, 30.0)
    root_y: tuple[float, float] = (31.0, 36.0)
    scale: tuple[float, float] = (0.8, 1.0)
    # renderer
    limb_width: float = 2.0
    joint_radius: float = 1.5
    head_radius: float = 3.5
    limb_value: float = 1.0
    joint_value: float = 0.8
    background: float = 0.0
    texture: float = 0.0          # amplitude of a smooth random background pattern
    clutter: int = 0              # distractor segments per image
    clutter_value: float = 0.6
    blur: float = 0.0
    noise: float = 0.02
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["bones"] = [BoneSpec(**b) for b in d.get("bones", [asdict(b) for b in default_bones()])]
        for k in ("root_x", "root_y", "scale"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# -- poses --------------------------------------------------------------------
def forward_kinematics(skeleton: Skeleton, root_pos, angles_deg, lengths) -> np.ndarray:
    """Keypoints from the root bone's proximal joint, per-bone relative angles and lengths."""
    coords = np.full((skeleton.K, 2), np.nan)
    absolute = np.zeros(skeleton.L)
    root = skeleton.root
    coords[skeleton.bones[root][1]] = root_pos
    for l in skeleton.order:
        p = skeleton.parents[l]
        absolute[l] = angles_deg[l] + (absolute[p] if p >= 0 else 0.0)
        a, b = skeleton.bones[l]
        r = np.radians(absolute[l])
        coords[a] = coords[b] + lengths[l] * np.array([np.cos(r), np.sin(r)])
    return coords


def sample_pose(spec: DomainSpec, rng: np.random.Generator, skeleton: Skeleton | None = None,
                max_attempts: int = 100) -> np.ndarray:
    skeleton = skeleton or default_skeleton()
    lo, hi = 0.0, spec.image_size - 1.0
    for _ in range(max_attempts):
        s = rng.uniform(*spec.scale)
        angles = np.array([rng.uniform(b.angle - b.spread, b.angle + b.spread) for b in spec.bones])
        lengths = np.array([b.length * s * (1 + rng.uniform(-b.jitter, b.jitter)) for b in spec.bones])
        root = (rng.uniform(*spec.root_x), rng.uniform(*spec.root_y))
        coords = forward_kinematics(skeleton, root, angles, lengths)
        if (coords >= lo + 1).all() and (coords <= hi - 1).all():
            return coords
    raise InfeasibleSpecError(f"domain {spec.name!r}: no in-frame pose after {max_attempts} attempts")


# -- rendering ----------------------------------------------------------------
def _segment_distance(px, py, p, q):
    d = q - p
    denom = float(d @ d)
    t = np.clip(((px - p[0]) * d[0] + (py - p[1]) * d[1]) / denom, 0, 1) if denom > 0 else 0.0
    return np.hypot(px - (p[0] + t * d[0]), py - (p[1] + t * d[1]))


def _paint(img, coverage, value):
    img *= 1 - coverage
    img += coverage * value


def render(coords: np.ndarray, spec: DomainSpec, rng: np.random.Generator,
           skeleton: Skeleton | None = None) -> np.ndarray:
    """Float image in [0, 1], shape (H, W)."""
    skeleton = skeleton or default_skeleton()
    n = spec.image_size
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.full((n, n), spec.background)
    if spec.texture > 0:
        field_ = gaussian_filter(rng.standard_normal((n, n)), 4.0)
        img += spec.texture * field_ / (field_.std() + 1e-12)
    for _ in range(spec.clutter):
        p, q = rng.uniform(0, n - 1, 2), rng.uniform(0, n - 1, 2)
        q = p + (q - p) * rng.uniform(0.15, 0.35)
        width = rng.uniform(0.6, 1.2) * spec.limb_width
        _paint(img, np.clip(width / 2 + 0.5 - _segment_distance(px, py, p, q), 0, 1), spec.clutter_value)
    for a, b in skeleton.bones:
        d = _segment_distance(px, py, coords[a], coords[b])
        _paint(img, np.clip(spec.limb_width / 2 + 0.5 - d, 0, 1), spec.limb_value)
    for k in range(skeleton.K):
        r = spec.head_radius if skeleton.names[k] == "head" else spec.joint_radius
        d = np.hypot(px - coords[k, 0], py - coords[k, 1])
        _paint(img, np.clip(r + 0.5 - d, 0, 1), spec.joint_value)
    if spec.blur > 0:
        img = gaussian_filter(img, spec.blur)
    if spec.noise > 0:
        img = img + rng.normal(0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


# -- domains ------------------------------------------------------------------
@dataclass
class ShiftConfig:
    appearance: float = 0.6      # 0 = none, 0.3 = mild, 0.6 = strong
    pose: float = 0.0            # 0 = same pose ranges, 1 = strongly shifted ranges

    PRESETS = {"none": 0.0, "mild": 0.3, "strong": 0.6}

    @classmethod
    def preset(cls, appearance: str = "strong", pose: float = 0.0) -> "ShiftConfig":
        return cls(cls.PRESETS[appearance], pose)


# appearance deltas at magnitude 1 (beyond "strong"; see PRESETS)
APPEARANCE_SHIFT = {"limb_width": 1.5, "joint_radius": 0.5, "limb_value": -0.45, "joint_value": -0.3,
                    "background": 0.16, "texture": 0.08, "clutter": 5, "blur": 0.9, "noise": 0.06}
# pose-range deltas at magnitude 1: arms raised, wider knee bends
POSE_SHIFT = {4: (-35.0, 10.0), 6: (35.0, 10.0), 5: (0.0, 20.0), 7: (0.0, 20.0), 9: (0.0, 15.0), 11: (0.0, 15.0)}


def make_shifted_pair(source: DomainSpec, shift: ShiftConfig) -> tuple[DomainSpec, DomainSpec]:
    if not (0 <= shift.appearance <= 2 and 0 <= shift.pose <= 2):
        raise ValueError("shift magnitudes must lie in [0, 2]")
    target = copy.deepcopy(source)
    target.name = "target"
    target.seed = source.seed + 7919
    for key, delta in APPEARANCE_SHIFT.items():
        val = getattr(source, key) + shift.appearance * delta
        setattr(target, key, int(round(val)) if isinstance(delta, int) else val)
    for l, (dangle, dspread) in POSE_SHIFT.items():
        b = target.bones[l]
        target.bones[l] = BoneSpec(b.angle + shift.pose * dangle, b.spread + shift.pose * dspread,
                                   b.length, b.jitter)
    return source, target


@dataclass
class Split:
    images: np.ndarray          # (N, H, W) uint8
    coords: np.ndarray          # (N, K, 2) image pixels
    visible: np.ndarray         # (N, K)

    def float_images(self) -> np.ndarray:
        return self.images.astype(np.float64)[:, None] / 255.0


def generate_split(spec: DomainSpec, n: int, seed: int, skeleton: Skeleton | None = None) -> Split:
    skeleton = skeleton or default_skeleton()
    rng = np.random.default_rng(seed)
    coords = np.stack([sample_pose(spec, rng, skeleton) for _ in range(n)])
    images = np.stack([to_uint8(render(c, spec, rng, skeleton)) for c in coords])
    return Split(images, coords, np.ones(coords.shape[:2], bool))


def generate_domain(spec: DomainSpec, skeleton: Skeleton | None = None) -> dict[str, Split]:
    return {"train": generate_split(spec, spec.n_train, spec.seed * 2 + 1, skeleton),
            "test": generate_split(spec, spec.n_test, spec.seed * 2 + 2, skeleton)}


def sample_aux_poses(spec: DomainSpec, n: int, seed: int, skeleton: Skeleton | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([sample_pose(spec, rng, skeleton) for _ in range(n)])


# -- files --------------------------------------------------------------------
def write_split(root: Path, split: Split, with_labels: bool = True) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    ids = [f"{i:06d}" for i in range(len(split.images))]
    for i, img in zip(ids, split.images):
        write_pgm(root / "images" / f"{i}.pgm", img)
    (root / "index.txt").write_text("\n".join(ids) + "\n")
    if with_labels:
        write_poses(root / "poses.jsonl",
                    [PoseRecord(i, c, v) for i, c, v in zip(ids, split.coords, split.visible)])


def read_split(root: Path, with_labels: bool = True) -> Split:
    root = Path(root)
    ids = (root / "index.txt").read_text().split()
    images = np.stack([read_pgm(root / "images" / f"{i}.pgm") for i in ids])
    if with_labels and (root / "poses.jsonl").exists():
        recs = {r.image_id: r for r in read_poses(root / "poses.jsonl")}
        coords = np.stack([recs[i].coords for i in ids])
        vis = np.stack([recs[i].visible for i in ids])
    else:
        coords = np.full((len(ids), 0, 2), np.nan)
        vis = np.zeros((len(ids), 0), bool)
    return Split(images, coords, vis)


def write_domain(root: Path, spec: DomainSpec, splits: dict[str, Split], skeleton: Skeleton,
                 unlabeled: tuple[str, ...] = ()) -> None:
    """Write splits, skeleton and the generating spec; labels of ``unlabeled`` splits are withheld."""
    root = Path(root)
    for name, split in splits.items():
        write_split(root / name, split, with_labels=name not in unlabeled)
    skeleton.save(root / "skeleton.json")
    manifest = {"spec": spec.to_dict(), "splits": {k: len(v.images) for k, v in splits.items()},
                "unlabeled": sorted(unlabeled)}
    (root / "domain.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def aux_records(coords: np.ndarray) -> list[PoseRecord]:
    return [PoseRecord(f"aux{i:06d}", c, np.ones(len(c), bool)) for i, c in enumerate(coords)]


def orientations_of(coords: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    return pose_to_orientations(coords, skeleton)
