"""Pose-manifold prior: an unsigned distance field over bone orientations.

Per-bone encoders run root-first down the kinematic tree, each seeing its own
orientation and its parent's code; the concatenated codes go through an MLP
whose softplus output is the predicted distance to the plausible-pose set.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .knn import ProductQuantizer, label_distances
from .optim import AdamState, adam_step
from .pose import Skeleton, bone_lengths, pose_to_orientations, soft_argmax, DELTA_MIN

log = logging.getLogger(__name__)

KAPPAS = (2.0, 4.0, 8.0)


@dataclass
class PriorConfig:
    code_size: int = 6
    enc_hidden: int = 32
    dec_hidden: int = 128
    dec_layers: int = 5


@dataclass
class PriorTrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    lr_drops: list[int] = field(default_factory=lambda: [20, 26])
    corrupt_per_pose: int = 3
    # share of near-manifold (kappa=8) corruptions in each curriculum third
    near_share: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5])
    k_prime: int = 500
    k: int = 5
    exact_knn: bool = False
    corruption: str = "componentwise"   # or "angle"
    seed: int = 0


def init_prior(cfg: PriorConfig, skeleton: Skeleton, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def linear(name, n_in, n_out):
        params[name + ".w"] = Tensor(rng.normal(0, np.sqrt(2.0 / n_in), (n_in, n_out)), requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(n_out), requires_grad=True)

    d = cfg.code_size
    for l in range(skeleton.L):
        n_in = 2 if skeleton.parents[l] < 0 else 2 + d
        linear(f"enc{l}.0", n_in, cfg.enc_hidden)
        linear(f"enc{l}.1", cfg.enc_hidden, d)
    widths = [d * skeleton.L] + [cfg.dec_hidden] * (cfg.dec_layers - 1) + [1]
    for i in range(cfg.dec_layers):
        linear(f"dec.{i}", widths[i], widths[i + 1])
    return params


def _check_unit(theta: np.ndarray, tol: float = 1e-3) -> None:
    dev = np.abs(np.linalg.norm(theta, axis=-1) - 1.0)
    if (dev > tol).any():
        raise ValueError(f"orientation vectors must be unit length (max deviation {dev.max():.3g})")


def encode(params: dict[str, Tensor], theta, skeleton: Skeleton) -> Tensor:
    """(B, L, 2) orientations -> pose code (B, d * L), bone blocks in bone-index order."""
    theta = ad.as_tensor(theta)
    _check_unit(theta.data)
    codes: dict[int, Tensor] = {}
    for l in skeleton.order:
        x = theta[:, l, :]
        p = skeleton.parents[l]
        if p >= 0:
            x = ad.concat([x, codes[p]], axis=-1)
        h = ad.relu(x @ params[f"enc{l}.0.w"] + params[f"enc{l}.0.b"])
        codes[l] = h @ params[f"enc{l}.1.w"] + params[f"enc{l}.1.b"]
    return ad.concat([codes[l] for l in range(skeleton.L)], axis=-1)


def score(params: dict[str, Tensor], theta, skeleton: Skeleton) -> Tensor:
    """Unsigned distance g(theta) >= 0, shape (B,)."""
    h = encode(params, theta, skeleton)
    n = sum(1 for k in params if k.startswith("dec.") and k.endswith(".w"))
    for i in range(n):
        h = h @ params[f"dec.{i}.w"] + params[f"dec.{i}.b"]
        if i < n - 1:
            h = ad.relu(h)
    return ad.softplus(h).reshape(-1)


def score_np(params: dict[str, Tensor], theta: np.ndarray, skeleton: Skeleton, batch: int = 2048) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, skeleton.L, 2)
    with ad.no_grad():
        return np.concatenate([score(params, theta[i:i + batch], skeleton).data
                               for i in range(0, len(theta), batch)])


# -- corruption ---------------------------------------------------------------
def vonmises_pdf(n, mu: float, kappa: float):
    return np.exp(kappa * np.cos(np.asarray(n) - mu)) / (2 * np.pi * np.i0(kappa))


def corrupt(theta: np.ndarray, rng: np.random.Generator, kappa=None, mode: str = "componentwise") -> np.ndarray:
    """Von Mises perturbation of every bone vector, renormalised to unit length.

    ``kappa`` is a scalar, a per-pose array, or None (drawn per pose from {2, 4, 8}).
    ``componentwise`` perturbs arccos(x) and arcsin(y) independently; ``angle``
    perturbs the single polar angle.
    """
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 2
    t = theta[None] if single else theta
    n_pose, n_bone = t.shape[:2]
    if kappa is None:
        kappa = rng.choice(KAPPAS, size=n_pose)
    kappa = np.broadcast_to(np.asarray(kappa, dtype=np.float64), (n_pose,))[:, None]
    if mode == "componentwise":
        n1 = rng.vonmises(0.0, np.broadcast_to(kappa, (n_pose, n_bone)))
        n2 = rng.vonmises(0.0, np.broadcast_to(kappa, (n_pose, n_bone)))
        u1 = np.arccos(np.clip(t[..., 0], -1, 1))
        u2 = np.arcsin(np.clip(t[..., 1], -1, 1))
        out = np.stack([np.cos(u1 + n1), np.sin(u2 + n2)], axis=-1)
        norm = np.linalg.norm(out, axis=-1, keepdims=True)
        # both components vanishing is a measure-zero event; fall back to the raw angle
        bad = norm[..., 0] < 1e-12
        if bad.any():
            ang = np.arctan2(t[..., 1], t[..., 0]) + n1
            out[bad] = np.stack([np.cos(ang), np.sin(ang)], axis=-1)[bad]
            norm = np.linalg.norm(out, axis=-1, keepdims=True)
        out = out / norm
    elif mode == "angle":
        n1 = rng.vonmises(0.0, np.broadcast_to(kappa, (n_pose, n_bone)))
        ang = np.arctan2(t[..., 1], t[..., 0]) + n1
        out = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    return out[0] if single else out


# -- training -----------------------------------------------------------------
@dataclass
class LabeledPool:
    theta: np.ndarray        # (M, L, 2)
    distance: np.ndarray     # (M,)
    kappa: np.ndarray        # (M,), 0 for clean poses


def build_pool(clean: np.ndarray, tcfg: PriorTrainConfig, rng: np.random.Generator) -> LabeledPool:
    n = len(clean)
    reps = np.repeat(clean, tcfg.corrupt_per_pose, axis=0)
    thetas, kappas = [], []
    for kappa in KAPPAS:
        thetas.append(corrupt(reps, rng, kappa, tcfg.corruption))
        kappas.append(np.full(len(reps), kappa))
    noisy = np.concatenate(thetas)
    index = None if tcfg.exact_knn or tcfg.k_prime >= n else ProductQuantizer(seed=tcfg.seed).fit(clean.reshape(n, -1))
    dist = label_distances(noisy, clean, tcfg.k_prime, tcfg.k, exact=tcfg.exact_knn, index=index)
    return LabeledPool(np.concatenate([clean, noisy]), np.concatenate([np.zeros(n), dist]),
                       np.concatenate([np.zeros(n)] + kappas))


def _epoch_indices(pool: LabeledPool, near: float, n_corrupt: int, rng: np.random.Generator) -> np.ndarray:
    clean = np.flatnonzero(pool.kappa == 0)
    shares = {8.0: near, 2.0: (1 - near) / 2, 4.0: (1 - near) / 2}
    picks = [clean]
    for kappa, share in shares.items():
        m = int(round(share * n_corrupt))
        if m:
            picks.append(rng.choice(np.flatnonzero(pool.kappa == kappa), m, replace=True))
    return rng.permutation(np.concatenate(picks))


def train_prior(clean: np.ndarray, skeleton: Skeleton, cfg: PriorConfig | None = None,
                tcfg: PriorTrainConfig | None = None, pool: LabeledPool | None = None):
    """Fit g to L1 distance labels with a near-manifold curriculum.

    ``clean`` holds orientation poses (N, L, 2).  Returns (params, per-epoch mean loss, pool).
    """
    cfg = cfg or PriorConfig()
    tcfg = tcfg or PriorTrainConfig()
    clean = np.asarray(clean, dtype=np.float64)
    if len(clean) == 0:
        raise ValueError("prior training needs at least one clean pose")
    rng = np.random.default_rng(tcfg.seed)
    if pool is None:
        pool = build_pool(clean, tcfg, rng)
    params = init_prior(cfg, skeleton, tcfg.seed)
    state = AdamState.like(params)
    n_corrupt = len(clean) * tcfg.corrupt_per_pose
    trace = []
    for epoch in range(tcfg.epochs):
        phase = min(epoch * len(tcfg.near_share) // max(tcfg.epochs, 1), len(tcfg.near_share) - 1)
        idx = _epoch_indices(pool, tcfg.near_share[phase], n_corrupt, rng)
        lr = tcfg.lr * 0.1 ** sum(epoch >= d for d in tcfg.lr_drops)
        losses = []
        for s in range(0, len(idx), tcfg.batch_size):
            b = idx[s:s + tcfg.batch_size]
            pred = score(params, pool.theta[b], skeleton)
            loss = ad.tabs(pred - pool.distance[b]).mean()
            ad.zero_grads(params.values())
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))
        if not np.isfinite(trace[-1]):
            raise FloatingPointError(f"prior training diverged at epoch {epoch}; trace {trace}")
        log.info("prior epoch %d near-share %.2f loss %.4f", epoch, tcfg.near_share[phase], trace[-1])
    return params, trace, pool


def frozen(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(p.data.copy()) for k, p in params.items()}


# -- adaptation regulariser ---------------------------------------------------
def prior_loss(heatmaps: Tensor, params: dict[str, Tensor], skeleton: Skeleton,
               grid_affines: np.ndarray | None = None, beta: float = 4.0,
               stats: dict | None = None) -> Tensor:
    """(1/|B|) sum_b g(T(soft_argmax(h_b))).

    ``grid_affines`` (B, 2, 3) optionally maps soft-argmax coordinates of each
    sample into a common frame before orientations are taken.  Samples with a
    degenerate bone are dropped and counted in ``stats['degenerate']``.
    """
    b = heatmaps.shape[0]
    coords = soft_argmax(heatmaps, beta)
    if grid_affines is not None:
        lin = Tensor(np.transpose(grid_affines[:, :, :2], (0, 2, 1)))
        coords = ad.matmul(coords, lin) + grid_affines[:, None, :, 2]
    ok = (bone_lengths(coords.data, skeleton) > DELTA_MIN).all(axis=-1)
    if stats is not None:
        stats["degenerate"] = stats.get("degenerate", 0) + int((~ok).sum())
    if not ok.any():
        return Tensor(0.0)
    if not ok.all():
        coords = coords[np.flatnonzero(ok)]
    theta = pose_to_orientations(coords, skeleton)
    return score(params, theta, skeleton).sum() * (1.0 / b)


# -- files --------------------------------------------------------------------
def save_prior(path, params: dict[str, Tensor], cfg: PriorConfig, skeleton: Skeleton, meta: dict | None = None):
    save_arrays(path, {k: p.data for k, p in params.items()},
                {"prior": asdict(cfg), "skeleton": skeleton.to_dict(), **(meta or {})})


def load_prior(path) -> tuple[dict[str, Tensor], PriorConfig, Skeleton, dict]:
    arrays, meta = load_arrays(path)
    if "prior" not in meta:
        raise ValueError(f"{path} is not a prior checkpoint")
    return ({k: Tensor(v) for k, v in arrays.items()}, PriorConfig(**meta["prior"]),
            Skeleton.from_dict(meta["skeleton"]), meta)


LABEL_MAGIC = b"SFPLBL01"


def write_labeled(path, theta: np.ndarray, distance: np.ndarray) -> None:
    theta = np.asarray(theta, dtype="<f8")
    m, n_bone = theta.shape[:2]
    rec = np.concatenate([theta.reshape(m, -1), np.asarray(distance, "<f8")[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC + struct.pack("<QQ", m, n_bone))
        fh.write(rec.astype("<f8").tobytes())


def read_labeled(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != LABEL_MAGIC:
        raise ValueError(f"{path}: not a labelled-pose cache")
    m, n_bone = struct.unpack("<QQ", raw[8:24])
    rec = np.frombuffer(raw[24:], dtype="<f8").reshape(m, 2 * n_bone + 1)
    return rec[:, :-1].reshape(m, n_bone, 2).copy(), rec[:, -1].copy()
