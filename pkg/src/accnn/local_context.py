"""Multi-scale local context: crops at several box scales fused into F_L."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import FeatureCube
from .boxes import BBox, scale_box
from .pooling import region_max_pool
from .tensor import Tensor, l2_normalize_scale

__all__ = [
    "LocalContextConfig",
    "ProposalFeatures",
    "box_to_region",
    "roi_pool",
    "l2_normalize_scale",
    "fuse_multiscale",
    "init_local",
    "local_feature",
    "calibrate_norm_scale",
]


@dataclass
class LocalContextConfig:
    scales: tuple[float, ...] = (0.8, 1.2, 1.8)
    pool_size: int = 7
    reduced_depth: int | None = None  # None: same as the cube depth
    fc_dims: tuple[int, int] = (256, 256)
    norm_scale_init: float = 1.0
    # None selects fan-in scaling (He for the ReLU layers); a float fixes the stddev
    init_stddev: float | None = None

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.fc_dims = tuple(int(d) for d in self.fc_dims)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be a nonempty list of positive floats")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly increasing, got {self.scales}")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if len(self.fc_dims) != 2 or min(self.fc_dims) <= 0:
            raise ValueError("fc_dims must be two positive ints")


@dataclass
class ProposalFeatures:
    F_L: Tensor  # (R, fc_dims[1])
    pooled: list[Tensor] = field(default_factory=list)  # one (R, P, P, D) per scale


def _axis_range(lo: float, hi: float, stride: int, limit: int) -> tuple[int, int]:
    a = max(0, math.floor(lo / stride))
    b = min(limit, math.ceil(hi / stride))
    if b <= a:
        c = min(max(int(((lo + hi) / 2) // stride), 0), limit - 1)
        return c, c + 1
    return a, b


def box_to_region(box: BBox, stride: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Half-open feature-cell range (y0, x0, y1, x1) covered by an image box.

    Boxes that collapse to nothing snap to the single nearest cell.
    """
    x1, y1, x2, y2 = box.corners
    y0, y1c = _axis_range(y1, y2, stride, height)
    x0, x1c = _axis_range(x1, x2, stride, width)
    return y0, x0, y1c, x1c


def roi_pool(cube: FeatureCube, boxes: BBox | Sequence[BBox], P: int) -> Tensor:
    """RoI max pooling: (P, P, D) for one box, (R, P, P, D) for a list."""
    single = isinstance(boxes, BBox)
    blist = [boxes] if single else list(boxes)
    regions = np.array([box_to_region(b, cube.stride, cube.height, cube.width) for b in blist], dtype=np.int64)
    out = region_max_pool(cube.data, regions.reshape(-1, 4), P)
    return T.index(out, 0) if single else out


def fuse_multiscale(feats: Sequence[Tensor], W: Tensor, b: Tensor | None = None) -> Tensor:
    """Concatenate per-scale pooled features on channels, then 1x1-reduce."""
    if not feats:
        raise ValueError("fuse_multiscale needs at least one feature")
    ref = feats[0].shape
    for f in feats[1:]:
        if f.shape != ref:
            raise ValueError(f"fuse_multiscale: pooled shapes differ ({ref} vs {f.shape})")
    return T.conv1x1(T.concat(list(feats), axis=-1), W, b)


def init_local(cfg: LocalContextConfig, depth: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    n = len(cfg.scales)
    d_red = cfg.reduced_depth or depth
    P = cfg.pool_size
    def std(fan_in, gain=1.0):
        return cfg.init_stddev if cfg.init_stddev is not None else gain / np.sqrt(fan_in)

    params = {}
    for i in range(n):
        params[f"local.gamma{i}"] = Tensor(np.full(depth, cfg.norm_scale_init), requires_grad=True, dtype=dtype)
    params["local.reduce.weight"] = Tensor(rng.normal(0, std(n * depth), (d_red, n * depth)), requires_grad=True, dtype=dtype)
    params["local.reduce.bias"] = Tensor(np.zeros(d_red), requires_grad=True, dtype=dtype)
    fan_in = P * P * d_red
    for k, width in enumerate(cfg.fc_dims):
        params[f"local.fc{k}.weight"] = Tensor(rng.normal(0, std(fan_in, np.sqrt(2.0)), (width, fan_in)), requires_grad=True, dtype=dtype)
        params[f"local.fc{k}.bias"] = Tensor(np.zeros(width), requires_grad=True, dtype=dtype)
        fan_in = width
    return params


def scaled_boxes(boxes: Sequence[BBox], lam: float, image_w: int, image_h: int) -> list[BBox]:
    return [scale_box(b, lam, image_w, image_h) for b in boxes]


def local_feature(
    cube: FeatureCube,
    boxes: Sequence[BBox],
    cfg: LocalContextConfig,
    params: dict[str, Tensor],
    image_w: int,
    image_h: int,
) -> ProposalFeatures:
    """scale -> RoI pool -> L2 normalise and scale -> fuse -> two FC+ReLU."""
    if isinstance(boxes, BBox):
        boxes = [boxes]
    pooled, normed = [], []
    for i, lam in enumerate(cfg.scales):
        p = roi_pool(cube, scaled_boxes(boxes, lam, image_w, image_h), cfg.pool_size)
        pooled.append(p)
        normed.append(l2_normalize_scale(p, params[f"local.gamma{i}"], batch_axes=1))
    fused = fuse_multiscale(normed, params["local.reduce.weight"], params["local.reduce.bias"])
    x = T.reshape(fused, (len(boxes), -1))
    for k in range(len(cfg.fc_dims)):
        x = T.relu(T.affine(x, params[f"local.fc{k}.weight"], params[f"local.fc{k}.bias"]))
    return ProposalFeatures(x, pooled)


def calibrate_norm_scale(
    params: dict[str, Tensor],
    cfg: LocalContextConfig,
    cubes_and_boxes: Sequence[tuple[FeatureCube, Sequence[BBox], int, int]],
    n_proposals: int = 100,
) -> list[float]:
    """Set each gamma so normalised outputs start at the mean pre-norm amplitude.

    Amplitude is the global L2 norm of a pooled crop, averaged over the
    first ``n_proposals`` warm-up proposals.
    """
    norms: list[list[float]] = [[] for _ in cfg.scales]
    seen = 0
    with T.no_grad():
        for cube, boxes, image_w, image_h in cubes_and_boxes:
            boxes = list(boxes)[: n_proposals - seen]
            if not boxes:
                break
            for i, lam in enumerate(cfg.scales):
                p = roi_pool(cube, scaled_boxes(boxes, lam, image_w, image_h), cfg.pool_size).data
                norms[i].extend(np.sqrt((p.astype(np.float64) ** 2).reshape(len(boxes), -1).sum(axis=1)))
            seen += len(boxes)
            if seen >= n_proposals:
                break
    values = []
    for i, ns in enumerate(norms):
        v = float(np.mean(ns)) if ns and np.mean(ns) > 0 else cfg.norm_scale_init
        g = params[f"local.gamma{i}"]
        g.data[...] = v
        values.append(v)
    return values
