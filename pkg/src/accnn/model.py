"""The full detector: backbone + local context + global attention + head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .boxes import BBox
from .global_attention import GlobalConfig, global_feature, init_global
from .head import RoiTarget, classify, init_head, multitask_loss, postprocess, regress
from .local_context import LocalContextConfig, init_local, local_feature
from .tensor import Tensor

VARIANTS = ("full", "minus_G", "minus_L", "avg_global")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    local: LocalContextConfig = field(default_factory=LocalContextConfig)
    global_: GlobalConfig = field(default_factory=GlobalConfig)
    n_classes: int = 3
    variant: str = "full"
    reg_weight: float = 1.0
    cls_init_std: float = 0.01
    reg_init_std: float = 0.001

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def uses_global(self) -> bool:
        return self.variant != "minus_G"

    def effective_local(self) -> LocalContextConfig:
        if self.variant == "minus_L":
            return replace(self.local, scales=(1.0,))
        return self.local

    def effective_global(self) -> GlobalConfig:
        if self.variant == "avg_global":
            return replace(self.global_, mode="average")
        return self.global_


@dataclass
class Outputs:
    scores: Tensor  # (R, K_cls + 1)
    deltas: Tensor  # (R, 4 K_cls)
    F_L: Tensor
    F_G: Tensor | None
    maps: list[Tensor]


class ACCNN:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or ModelConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = self.cfg
        depth = c.backbone.depth
        self.params: dict[str, Tensor] = {}
        self.params.update(init_backbone(c.backbone, rng, dtype))
        self.params.update(init_local(c.effective_local(), depth, rng, dtype))
        dim_g = 0
        if c.uses_global:
            self.params.update(init_global(c.effective_global(), depth, rng, dtype))
            dim_g = c.global_.fc_dims[-1]
        self.params.update(init_head(c.n_classes, c.local.fc_dims[-1], dim_g, rng, dtype, c.cls_init_std, c.reg_init_std))
        for name, p in self.params.items():
            p.name = name
        self.target_mean = np.zeros(4)
        self.target_std = np.ones(4)

    # -- parameters -------------------------------------------------------

    def global_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("global.")]

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.params.items()}
        out["meta.target_mean"] = self.target_mean.astype(np.float32)
        out["meta.target_std"] = self.target_std.astype(np.float32)
        return out

    def expected_shapes(self) -> dict[str, tuple]:
        shapes = {n: p.shape for n, p in self.params.items()}
        shapes["meta.target_mean"] = (4,)
        shapes["meta.target_std"] = (4,)
        return shapes

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        checkpoint.check_compatible(self.expected_shapes(), arrays)
        for n, p in self.params.items():
            p.data = arrays[n].astype(self.dtype)
            p.grad = np.zeros_like(p.data)
        self.target_mean = arrays["meta.target_mean"].astype(np.float64)
        self.target_std = arrays["meta.target_std"].astype(np.float64)

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(checkpoint.load(path))

    # -- forward ----------------------------------------------------------

    def cube(self, image: np.ndarray):
        return backbone_forward(Tensor(image, dtype=self.dtype), self.params, self.cfg.backbone)

    def forward(self, image: np.ndarray, boxes: Sequence[BBox]) -> Outputs:
        """Scores and deltas for every box; F_G is computed once per image."""
        c = self.cfg
        cube = self.cube(image)
        h, w = image.shape[:2]
        feats = local_feature(cube, list(boxes), c.effective_local(), self.params, w, h)
        F_G, maps = None, []
        if c.uses_global:
            F_G, maps = global_feature(cube, c.effective_global(), self.params)
        scores = classify(feats.F_L, F_G, self.params)
        deltas = regress(feats.F_L, self.params)
        return Outputs(scores, deltas, feats.F_L, F_G, maps)

    def attention_maps(self, image: np.ndarray) -> list[np.ndarray]:
        with T.no_grad():
            cube = self.cube(image)
            _, maps = global_feature(cube, self.cfg.effective_global(), self.params)
        return [m.data for m in maps]

    def roi_targets(self, labels: np.ndarray, targets: np.ndarray) -> list[RoiTarget]:
        norm = (targets - self.target_mean) / self.target_std
        return [RoiTarget(int(g), norm[i] if g >= 1 else None) for i, g in enumerate(labels)]

    def loss(self, image: np.ndarray, boxes, labels, targets, n_total: int | None = None):
        """Multi-task loss for one image, scaled as part of a batch of ``n_total`` RoIs."""
        out = self.forward(image, boxes)
        J, J_cls, J_reg = multitask_loss(out.scores, out.deltas, self.roi_targets(labels, targets), self.cfg.reg_weight)
        if n_total is not None and n_total != len(boxes):
            f = len(boxes) / n_total
            J, J_cls = T.scale(J, f), T.scale(J_cls, f)
            J_reg = T.scale(J_reg, f) if J_reg is not None else None
        return J, J_cls, J_reg, out

    def detect(self, image: np.ndarray, boxes: Sequence[BBox], image_id=0, score_thr: float = 0.05,
               nms_thr: float = 0.3, chunk: int = 256):
        with T.no_grad():
            probs, deltas = [], []
            for s in range(0, len(boxes), chunk):
                out = self.forward(image, boxes[s : s + chunk])
                probs.append(T.softmax(out.scores).data)
                deltas.append(out.deltas.data)
        probs = np.concatenate(probs).astype(np.float64)
        deltas = np.concatenate(deltas).astype(np.float64)
        props = np.array([b.as_array() for b in boxes])
        h, w = image.shape[:2]
        return postprocess(image_id, props, probs, deltas, w, h, score_thr, nms_thr, self.target_mean, self.target_std)
