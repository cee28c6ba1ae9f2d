"""Supervised source training and PCK evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, apply, sample_spec, transform_points
from .model import PoseNetConfig, forward, init_params, predict
from .optim import AdamState, adam_step
from .pose import Skeleton, argmax_decode, pck, refine_quarter, render_gaussian
from .synth import Split

log = logging.getLogger(__name__)


@dataclass
class SourceTrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 1e-3
    lr_drops: list[int] = field(default_factory=lambda: [8, 11])
    sigma: float = 1.0
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(
        rotation=15.0, translation=0.05, shear=0.05, scale=(0.9, 1.1),
        blur=0.5, brightness=0.05, contrast=0.1))
    seed: int = 0


def step_lr(base: float, epoch: int, drops: list[int]) -> float:
    return base * 0.1 ** sum(epoch >= d for d in drops)


def heatmap_mse(pred: ad.Tensor, target: np.ndarray, weight: np.ndarray, valid: np.ndarray | None = None) -> ad.Tensor:
    """(1/B) * sum_k weight_k * mean over valid pixels of (pred - target)^2."""
    b = pred.shape[0]
    if valid is None:
        valid = np.ones((b,) + pred.shape[-2:])
    npix = np.maximum(valid.sum(axis=(-2, -1)), 1.0)
    w = weight[..., None, None] * (valid / npix[:, None, None])[:, None]
    return ((pred - target) ** 2 * w).sum() * (1.0 / b)


def augmented_batch(images: np.ndarray, coords: np.ndarray, visible: np.ndarray, cfg: PoseNetConfig,
                    aug: AugmentConfig, sigma: float, rng: np.random.Generator):
    frame = cfg.frame
    xs, targets, weights = [], [], []
    for img, c, v in zip(images, coords, visible):
        spec = sample_spec(rng, aug, (cfg.input_size, cfg.input_size))
        xs.append(apply(spec, img))
        grid = frame.to_grid(transform_points(spec.affine, c))
        maps, in_frame = render_gaussian(grid, sigma, frame.height, frame.width, v)
        targets.append(maps)
        weights.append(np.ones(len(c)))
    return np.stack(xs), np.stack(targets), np.stack(weights)


def train_source(cfg: PoseNetConfig, data: Split, tcfg: SourceTrainConfig,
                 callback=None) -> tuple[dict[str, ad.Tensor], list[float]]:
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(cfg, tcfg.seed)
    state = AdamState.like(params)
    images = data.float_images()
    n = len(images)
    trace = []
    for epoch in range(tcfg.epochs):
        lr = step_lr(tcfg.lr, epoch, tcfg.lr_drops)
        order = rng.permutation(n)
        losses = []
        for i in range(0, n - tcfg.batch_size + 1, tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size]
            x, target, weight = augmented_batch(images[idx], data.coords[idx], data.visible[idx],
                                                cfg, tcfg.augment, tcfg.sigma, rng)
            h, _ = forward(cfg, params, x)
            loss = heatmap_mse(h, target, weight)
            ad.zero_grads(params.values())
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
            losses.append(loss.item())
            if not np.isfinite(losses[-1]):
                raise FloatingPointError(f"source training diverged at epoch {epoch}")
        trace.append(float(np.mean(losses)))
        log.info("source epoch %d lr %.1e loss %.5f", epoch, lr, trace[-1])
        if callback:
            callback(epoch, params)
    return params, trace


def decode_image_coords(cfg: PoseNetConfig, heatmaps: np.ndarray, refine: bool = True) -> np.ndarray:
    coords, _ = argmax_decode(heatmaps)
    if refine:
        coords = refine_quarter(heatmaps, coords)
    return cfg.frame.to_image(coords)


def evaluate(cfg: PoseNetConfig, params, data: Split, skeleton: Skeleton, fraction: float = 0.05) -> dict:
    heat = predict(cfg, params, data.float_images())
    pred = decode_image_coords(cfg, heat)
    return pck(pred, data.coords, cfg.input_size, fraction, data.visible, skeleton)
