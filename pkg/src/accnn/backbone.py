"""Small convolutional trunk producing the shared feature cube."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64, 64)
    stride: int = 8
    kernel: int = 3
    # None selects He-normal (sqrt(2 / fan_in)); a float fixes the stddev
    init_stddev: float | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError("backbone widths must be positive")
        s = int(self.stride)
        if s < 1 or s & (s - 1):
            raise ValueError(f"stride must be a positive power of two, got {s}")
        if self.n_pools > len(self.widths):
            raise ValueError(f"stride {s} needs at least {self.n_pools} stages")

    @property
    def depth(self) -> int:
        return self.widths[-1]

    @property
    def n_pools(self) -> int:
        return int(self.stride).bit_length() - 1


@dataclass
class FeatureCube:
    """H x W x D activation map plus the image-to-cell stride."""

    data: Tensor
    stride: int

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params = {}
    c_in = 3
    k = cfg.kernel
    for i, c_out in enumerate(cfg.widths):
        std = cfg.init_stddev if cfg.init_stddev is not None else math.sqrt(2.0 / (k * k * c_in))
        params[f"backbone.conv{i}.weight"] = Tensor(rng.normal(0.0, std, (k, k, c_in, c_out)), requires_grad=True, dtype=dtype)
        params[f"backbone.conv{i}.bias"] = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
        c_in = c_out
    return params


def backbone_forward(image: Tensor, params: dict[str, Tensor], cfg: BackboneConfig) -> FeatureCube:
    """conv-ReLU stages with a 2x2 max-pool after each of the first log2(stride) stages."""
    if image.data.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("zero-sized image")
    x = image
    for i in range(len(cfg.widths)):
        x = T.relu(T.conv2d(x, params[f"backbone.conv{i}.weight"], params[f"backbone.conv{i}.bias"]))
        if i < cfg.n_pools:
            x = T.maxpool2x2(x)
    return FeatureCube(x, cfg.stride)
