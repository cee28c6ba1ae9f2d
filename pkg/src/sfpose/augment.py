"""Paired augmentations and their spatial inverses.

Affines act on (x, y) pixel coordinates with pixel centres at integers; a
warp by ``A`` produces ``out(q) = in(A^-1 q)`` with bilinear sampling and zero
padding.  Maps living on a coarser grid (heatmaps, features) are warped with
the affine conjugated by the grid-to-image scaling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .autodiff import Tensor
from .pose import HeatmapFrame


@dataclass
class AugmentConfig:
    rotation: float = 30.0          # degrees, symmetric range
    translation: float = 0.05       # fraction of image size
    shear: float = 0.1
    scale: tuple[float, float] = (0.9, 1.1)
    blur: float = 1.0               # max Gaussian blur sigma (px)
    brightness: float = 0.1
    contrast: float = 0.2
    teacher_strength: float = 1.0   # range multiplier for the first (teacher) view

    def scaled(self, f: float) -> "AugmentConfig":
        lo, hi = self.scale
        return AugmentConfig(self.rotation * f, self.translation * f, self.shear * f,
                             (1 - (1 - lo) * f, 1 + (hi - 1) * f), self.blur * f,
                             self.brightness * f, self.contrast * f, 1.0)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), 0.0, 0.0, 0.0)


@dataclass
class AugmentSpec:
    affine: np.ndarray               # 2x3, image pixels
    blur: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0

    def __post_init__(self):
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(2, 3)
        if abs(np.linalg.det(self.affine[:, :2])) <= 1e-6:
            raise ValueError("augmentation affine is not invertible")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(np.eye(2, 3))

    @property
    def inverse_affine(self) -> np.ndarray:
        return invert_affine(self.affine)


def invert_affine(a: np.ndarray) -> np.ndarray:
    m = np.linalg.inv(a[:, :2])
    return np.hstack([m, -m @ a[:, 2:]])


def compose_affine(rotation_deg: float, translation: tuple[float, float], shear: float,
                   scale: float, center: tuple[float, float]) -> np.ndarray:
    r = math.radians(rotation_deg)
    rot = np.array([[math.cos(r), -math.sin(r)], [math.sin(r), math.cos(r)]])
    lin = rot @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    c = np.asarray(center, dtype=np.float64)
    t = c + np.asarray(translation) - lin @ c
    return np.hstack([lin, t[:, None]])


def transform_points(affine: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ affine[:, :2].T + affine[:, 2]


def sample_spec(rng: np.random.Generator, cfg: AugmentConfig, size: tuple[int, int]) -> AugmentSpec:
    h, w = size
    lo, hi = cfg.scale
    affine = compose_affine(rng.uniform(-cfg.rotation, cfg.rotation),
                            tuple(rng.uniform(-cfg.translation, cfg.translation, 2) * (w, h)),
                            rng.uniform(-cfg.shear, cfg.shear),
                            rng.uniform(lo, hi),
                            ((w - 1) / 2, (h - 1) / 2))
    return AugmentSpec(affine, rng.uniform(0, cfg.blur),
                       rng.uniform(-cfg.brightness, cfg.brightness),
                       1.0 + rng.uniform(-cfg.contrast, cfg.contrast))


def sample_pair(rng: np.random.Generator, cfg: AugmentConfig,
                size: tuple[int, int] = (64, 64)) -> tuple[AugmentSpec, AugmentSpec]:
    first = cfg if cfg.teacher_strength == 1.0 else cfg.scaled(cfg.teacher_strength)
    return sample_spec(rng, first, size), sample_spec(rng, cfg, size)


# -- warping ------------------------------------------------------------------
def grid_affine(affine: np.ndarray, frame: HeatmapFrame) -> np.ndarray:
    """Conjugate an image-space affine into a grid frame."""
    s, o = frame.stride, frame.offset
    to_img = np.array([[s, 0, o], [0, s, o], [0, 0, 1.0]])
    to_grid = np.array([[1 / s, 0, -o / s], [0, 1 / s, -o / s], [0, 0, 1.0]])
    full = to_grid @ np.vstack([affine, [0, 0, 1.0]]) @ to_img
    return full[:2]


def _bilinear_taps(affine: np.ndarray, h: int, w: int):
    """Source taps for every output pixel of a warp by ``affine``."""
    inv = invert_affine(affine)
    ys, xs = np.mgrid[0:h, 0:w]
    src = transform_points(inv, np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64))
    sx, sy = src[:, 0], src[:, 1]
    # round near-integers so exact shifts stay exact
    sx = np.where(np.abs(sx - np.round(sx)) < 1e-9, np.round(sx), sx)
    sy = np.where(np.abs(sy - np.round(sy)) < 1e-9, np.round(sy), sy)
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    taps = []
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wt != 0)
        taps.append((np.where(inside, yi * w + xi, 0), np.where(inside, wt, 0.0)))
    return taps, valid


def warp_array(arr: np.ndarray, affine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Warp the last two axes of ``arr``; returns (warped, valid mask (H, W))."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    taps, valid = _bilinear_taps(affine, h, w)
    flat = arr.reshape(*arr.shape[:-2], h * w)
    out = sum(flat[..., idx] * wt for idx, wt in taps)
    return out.reshape(arr.shape), valid.reshape(h, w)


def warp_matrix(affine: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense M with ``warp(m).ravel() == M @ m.ravel()``, plus the valid mask (H*W,)."""
    taps, valid = _bilinear_taps(affine, h, w)
    m = np.zeros((h * w, h * w))
    rows = np.arange(h * w)
    for idx, wt in taps:
        np.add.at(m, (rows, idx), wt)
    return m, valid


def photometric(spec: AugmentSpec, image: np.ndarray) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    if spec.blur > 0:
        sig = [0.0] * (out.ndim - 2) + [spec.blur, spec.blur]
        out = gaussian_filter(out, sigma=sig, mode="constant")
    if spec.contrast != 1.0 or spec.brightness != 0.0:
        m = out.mean(axis=(-2, -1), keepdims=True)
        out = (out - m) * spec.contrast + m + spec.brightness
    return out


def apply(spec: AugmentSpec, image: np.ndarray) -> np.ndarray:
    warped, _ = warp_array(image, spec.affine)
    return photometric(spec, warped)


def apply_spatial(spec: AugmentSpec, maps: np.ndarray, frame: HeatmapFrame | None = None):
    a = spec.affine if frame is None else grid_affine(spec.affine, frame)
    return warp_array(maps, a)


def apply_spatial_inverse(spec: AugmentSpec, maps: np.ndarray, frame: HeatmapFrame | None = None):
    """Undo the spatial part of ``spec``; photometrics have identity inverse."""
    a = spec.inverse_affine if frame is None else grid_affine(spec.inverse_affine, frame)
    return warp_array(maps, a)


def inverse_warp_tensor(maps: Tensor, specs: list[AugmentSpec], frame: HeatmapFrame) -> tuple[Tensor, np.ndarray]:
    """Differentiable inverse warp of (B, C, H, W) maps, one spec per sample.

    Returns the warped maps and the per-sample valid masks (B, H, W).
    """
    b, c, h, w = maps.shape
    mats, valids = zip(*(warp_matrix(grid_affine(s.inverse_affine, frame), h, w) for s in specs))
    m = np.stack(mats).transpose(0, 2, 1)
    out = ad.matmul(maps.reshape(b, c, h * w), Tensor(m)).reshape(b, c, h, w)
    return out, np.stack(valids).reshape(b, h, w)
