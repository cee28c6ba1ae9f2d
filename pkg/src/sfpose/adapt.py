"""Mean-Teacher source-free adaptation with output, feature and prior losses."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, AugmentSpec, apply, apply_spatial_inverse, grid_affine, \
    inverse_warp_tensor, sample_pair
from .autodiff import Tensor
from .model import PoseNetConfig, copy_params, forward, pool_and_normalize
from .optim import AdamState, adam_step
from .pose import HeatmapFrame, Skeleton, argmax_decode, render_gaussian
from .prior import prior_loss
from .train import decode_image_coords, step_lr
from .model import predict
from .pose import pck

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    epochs: int = 30
    iters_per_epoch: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    lr_drops: list[int] = field(default_factory=lambda: [5, 20])
    alpha: float = 0.999
    p: float = 0.5
    lambda_feat: float = 1e-3
    lambda_prior: float = 1e-4
    gamma: float = 5e-3
    sigma: float = 1.0
    beta: float = 4.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0


@dataclass
class AdaptState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    opt: AdamState
    step: int = 0
    counters: dict = field(default_factory=lambda: {"empty_mask": 0, "zero_var": 0, "degenerate": 0})

    @classmethod
    def from_source(cls, source: dict[str, Tensor]) -> "AdaptState":
        student = copy_params(source, requires_grad=True)
        teacher = copy_params(source, requires_grad=False)
        return cls(student, teacher, AdamState.like(student))


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], alpha: float) -> None:
    for k, t in teacher.items():
        t.data = alpha * t.data + (1.0 - alpha) * student[k].data


@dataclass
class PseudoLabels:
    heatmaps: np.ndarray      # rendered targets in the first view's grid (B, K, H', W')
    keep: np.ndarray          # (B, K) bool
    coords: np.ndarray        # argmax coordinates (B, K, 2)
    confidence: np.ndarray    # (B, K)
    tau: float
    features: np.ndarray      # teacher encoder output (B, F, Ch, Cw)


def keep_top_fraction(conf: np.ndarray, p: float) -> tuple[np.ndarray, float]:
    """Mask of the ceil(p * n) most confident entries; ties keep the earliest."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    flat = conf.ravel()
    n_keep = math.ceil(p * flat.size - 1e-9)
    order = np.argsort(-flat, kind="stable")[:n_keep]
    keep = np.zeros(flat.size, bool)
    keep[order] = True
    return keep.reshape(conf.shape), float(flat[order[-1]]) if n_keep else float("inf")


def make_pseudo_labels(cfg: PoseNetConfig, teacher: dict[str, Tensor], views: np.ndarray,
                       p: float, sigma: float) -> PseudoLabels:
    with ad.no_grad():
        h, z = forward(cfg, teacher, views)
    coords, conf = argmax_decode(h.data)
    keep, tau = keep_top_fraction(conf, p)
    frame = cfg.frame
    maps, _ = render_gaussian(coords, sigma, frame.height, frame.width)
    return PseudoLabels(maps, keep, coords, conf, tau, z.data)


def loss_out(pseudo: np.ndarray, student: Tensor, specs1: list[AugmentSpec], specs2: list[AugmentSpec],
             keep: np.ndarray, frame: HeatmapFrame, stats: dict | None = None) -> Tensor:
    """(1/B) sum_k keep_k * mean over jointly valid pixels of (A1^-1 pseudo - A2^-1 student)^2."""
    b = student.shape[0]
    if not keep.any():
        if stats is not None:
            stats["empty_mask"] = stats.get("empty_mask", 0) + 1
        return Tensor(0.0)
    target, valid1 = zip(*(apply_spatial_inverse(s, m, frame) for s, m in zip(specs1, pseudo)))
    warped, valid2 = inverse_warp_tensor(student, specs2, frame)
    valid = np.stack(valid1) & valid2
    npix = np.maximum(valid.sum(axis=(-2, -1)), 1)
    w = keep[..., None, None] * (valid / npix[:, None, None])[:, None]
    return ((warped - np.stack(target)) ** 2 * w).sum() * (1.0 / b)


def cross_correlation(zt: np.ndarray, zs: Tensor, eps: float = 1e-12, stats: dict | None = None) -> Tensor:
    """C_ij = sum_b zt_bi zs_bj / (|zt_i| |zs_j|) over the batch; teacher side is constant."""
    zt = np.asarray(zt, dtype=np.float64)
    nt = np.sqrt((zt ** 2).sum(axis=0) + eps)
    ns = ad.sqrt((zs ** 2).sum(axis=0) + eps)
    if stats is not None:
        dead = int(((zt ** 2).sum(axis=0) < eps).sum() + ((zs.data ** 2).sum(axis=0) < eps).sum())
        stats["zero_var"] = stats.get("zero_var", 0) + dead
    num = ad.matmul(Tensor(zt.T), zs)
    return num / (nt[:, None] * ns.reshape(1, -1))


def loss_feat(zt: np.ndarray, zs: Tensor, gamma: float = 5e-3, eps: float = 1e-12,
              stats: dict | None = None) -> Tensor:
    """sum_i (1 - C_ii)^2 + gamma * sum_{i != j} C_ij^2."""
    if zs.shape[0] < 2:
        raise ValueError("cross-correlation needs a batch of at least 2")
    c = cross_correlation(zt, zs, eps, stats)
    f = c.shape[0]
    eye = np.eye(f)
    on = ((1.0 - c) * eye) ** 2
    off = (c * (1.0 - eye)) ** 2
    return on.sum() + off.sum() * gamma


def adapt_step(state: AdaptState, images: np.ndarray, cfg: PoseNetConfig, acfg: AdaptConfig,
               rng: np.random.Generator, skeleton: Skeleton | None = None,
               prior: dict[str, Tensor] | None = None, lr: float | None = None,
               specs: tuple[list[AugmentSpec], list[AugmentSpec]] | None = None) -> dict:
    """One student update on L_out + l1 * L_feat + l2 * L_prior, then the teacher EMA."""
    frame = cfg.frame
    size = (cfg.input_size, cfg.input_size)
    if specs is None:
        pairs = [sample_pair(rng, acfg.augment, size) for _ in range(len(images))]
        specs = ([a for a, _ in pairs], [b for _, b in pairs])
    specs1, specs2 = specs
    view1 = np.stack([apply(s, im) for s, im in zip(specs1, images)])
    view2 = np.stack([apply(s, im) for s, im in zip(specs2, images)])

    pl = make_pseudo_labels(cfg, state.teacher, view1, acfg.p, acfg.sigma)
    h, z = forward(cfg, state.student, view2)
    l_out = loss_out(pl.heatmaps, h, specs1, specs2, pl.keep, frame, state.counters)
    total = l_out
    terms = {"L_out": l_out.item(), "L_feat": 0.0, "L_prior": 0.0}

    if acfg.lambda_feat > 0:
        fh, fw = z.shape[-2:]
        fframe = HeatmapFrame(fh, fw, cfg.input_size / fh)
        zt_map, vt = zip(*(apply_spatial_inverse(s, m, fframe) for s, m in zip(specs1, pl.features)))
        zs_map, vs = inverse_warp_tensor(z, specs2, fframe)
        mask = np.stack(vt) & vs
        zt = pool_and_normalize(Tensor(np.stack(zt_map)), mask).data
        zs = pool_and_normalize(zs_map, mask)
        l_feat = loss_feat(zt, zs, acfg.gamma, stats=state.counters)
        total = total + l_feat * acfg.lambda_feat
        terms["L_feat"] = l_feat.item()

    if acfg.lambda_prior > 0 and prior is not None:
        affines = np.stack([grid_affine(s.inverse_affine, frame) for s in specs2])
        l_prior = prior_loss(h, prior, skeleton, affines, acfg.beta, state.counters)
        total = total + l_prior * acfg.lambda_prior
        terms["L_prior"] = l_prior.item()

    terms["total"] = total.item()
    if not all(np.isfinite(v) for v in terms.values()):
        raise FloatingPointError(f"non-finite adaptation loss at step {state.step}: {terms}")
    ad.zero_grads(state.student.values())
    if total.requires_grad:
        total.backward()
    adam_step(state.student, {k: p.grad for k, p in state.student.items()}, state.opt,
              acfg.lr if lr is None else lr)
    ema_update(state.teacher, state.student, acfg.alpha)
    state.step += 1
    terms["kept_fraction"] = float(pl.keep.mean())
    terms["tau"] = pl.tau
    return terms


def run_adaptation(cfg: PoseNetConfig, source: dict[str, Tensor], target_images: np.ndarray,
                   acfg: AdaptConfig, skeleton: Skeleton, prior: dict[str, Tensor] | None = None,
                   eval_split=None, callback=None) -> tuple[AdaptState, list[dict], list[dict]]:
    """Epoch loop; returns final state, per-step trace and per-epoch PCK records.

    ``eval_split`` is a labelled held-out target split used for reporting only.
    """
    rng = np.random.default_rng(acfg.seed)
    state = AdaptState.from_source(source)
    n = len(target_images)
    order, cursor = rng.permutation(n), 0
    trace, epochs = [], []
    for epoch in range(acfg.epochs):
        lr = step_lr(acfg.lr, epoch, acfg.lr_drops)
        for _ in range(acfg.iters_per_epoch):
            if cursor + acfg.batch_size > n:
                order, cursor = rng.permutation(n), 0
            idx = order[cursor:cursor + acfg.batch_size]
            cursor += acfg.batch_size
            terms = adapt_step(state, target_images[idx], cfg, acfg, rng, skeleton, prior, lr)
            trace.append({"epoch": epoch, "step": state.step, **terms})
        rec = {"epoch": epoch, "lr": lr}
        if eval_split is not None:
            for which in ("student", "teacher"):
                params = state.student if which == "student" else state.teacher
                heat = predict(cfg, params, eval_split.float_images())
                rec[f"pck_{which}"] = pck(decode_image_coords(cfg, heat), eval_split.coords,
                                          cfg.input_size, 0.05, eval_split.visible, skeleton)["avg"]
        epochs.append(rec)
        log.info("adapt epoch %d %s", epoch, rec)
        if callback:
            callback(epoch, state, rec)
    return state, trace, epochs
