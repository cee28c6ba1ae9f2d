"""Desk-scale heatmap pose network ``f = Dec o Enc`` with a feature tap."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .pose import HeatmapFrame


@dataclass
class PoseNetConfig:
    input_size: int = 64
    in_channels: int = 1
    num_keypoints: int = 13
    enc_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    enc_strides: list[int] = field(default_factory=lambda: [2, 2, 2, 1])
    dec_channels: list[int] = field(default_factory=lambda: [32])
    upsample: str = "bilinear"
    zero_head: bool = False

    @property
    def feature_size(self) -> int:
        return self.input_size // int(np.prod(self.enc_strides))

    @property
    def heatmap_size(self) -> int:
        return self.feature_size * 2 ** len(self.dec_channels)

    @property
    def frame(self) -> HeatmapFrame:
        return HeatmapFrame(self.heatmap_size, self.heatmap_size, self.input_size / self.heatmap_size)

    @property
    def num_features(self) -> int:
        return self.enc_channels[-1]


def init_params(cfg: PoseNetConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv(name, cin, cout, k=3, zero=False):
        std = np.sqrt(2.0 / (cin * k * k))
        w = np.zeros((cout, cin, k, k)) if zero else rng.normal(0.0, std, (cout, cin, k, k))
        params[name + ".w"] = Tensor(w, requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True)

    cin = cfg.in_channels
    for i, c in enumerate(cfg.enc_channels):
        conv(f"enc{i}", cin, c)
        cin = c
    for i, c in enumerate(cfg.dec_channels):
        conv(f"dec{i}", cin, c)
        cin = c
    conv("head", cin, cfg.num_keypoints, zero=cfg.zero_head)
    return params


def encode(cfg: PoseNetConfig, params: dict[str, Tensor], x: Tensor) -> Tensor:
    for i, s in enumerate(cfg.enc_strides):
        x = ad.relu(ad.conv2d(x, params[f"enc{i}.w"], params[f"enc{i}.b"], stride=s, padding=1))
    return x


def decode(cfg: PoseNetConfig, params: dict[str, Tensor], z: Tensor) -> Tensor:
    for i in range(len(cfg.dec_channels)):
        z = ad.relu(ad.conv2d(z, params[f"dec{i}.w"], params[f"dec{i}.b"], padding=1))
        z = ad.upsample2d(z, 2, cfg.upsample)
    return ad.conv2d(z, params["head.w"], params["head.b"], padding=1)


def forward(cfg: PoseNetConfig, params: dict[str, Tensor], images) -> tuple[Tensor, Tensor]:
    """Images (B, C, H, W) -> (heatmaps (B, K, H', W'), encoder features (B, F, Ch, Cw))."""
    x = ad.as_tensor(images)
    if x.ndim == 3:
        x = x.reshape(x.shape[0], 1, *x.shape[1:])
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ad.ShapeError(f"image batch {x.shape} does not match model input {expected}")
    z = encode(cfg, params, x)
    return decode(cfg, params, z), z


def predict(cfg: PoseNetConfig, params: dict[str, Tensor], images: np.ndarray, batch: int = 100) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            h, _ = forward(cfg, params, images[i:i + batch])
            out.append(h.data)
    return np.concatenate(out)


def copy_params(params: dict[str, Tensor], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(p.data.copy(), requires_grad=requires_grad) for k, p in params.items()}


def num_params(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


def save_model(path, cfg: PoseNetConfig, params: dict[str, Tensor], meta: dict | None = None) -> None:
    from dataclasses import asdict
    save_arrays(path, {k: p.data for k, p in params.items()}, {"model": asdict(cfg), **(meta or {})})


def load_model(path) -> tuple[PoseNetConfig, dict[str, Tensor], dict]:
    arrays, meta = load_arrays(path)
    if "model" not in meta:
        raise ValueError(f"{path} is not a pose model checkpoint")
    cfg = PoseNetConfig(**meta["model"])
    return cfg, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}, meta


def pool_and_normalize(features: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Masked spatial average pooling, then per-feature mean removal across the batch."""
    b = features.shape[0]
    if b < 2:
        raise ValueError("feature normalisation needs a batch of at least 2")
    if valid is None:
        valid = np.ones((b,) + features.shape[-2:])
    w = valid / np.maximum(valid.sum(axis=(-2, -1), keepdims=True), 1)
    pooled = (features * w[:, None]).sum(axis=(-2, -1))
    return pooled - pooled.mean(axis=0, keepdims=True)
