"""Classification / regression head, multi-task loss and NMS."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .boxes import decode_deltas, iou, to_corners, clip_corners
from .tensor import Tensor


@dataclass
class RoiTarget:
    g: int  # 0 = background
    t: np.ndarray | None = None  # (4,) regression target, needed when g >= 1

    def __post_init__(self):
        if self.g < 0:
            raise ValueError(f"class label must be >= 0, got {self.g}")
        if self.g >= 1:
            if self.t is None:
                raise ValueError("foreground target needs regression deltas")
            self.t = np.asarray(self.t, dtype=np.float64).reshape(4)
            if not np.all(np.isfinite(self.t)):
                raise ValueError("regression target must be finite")


@dataclass
class Detection:
    image_id: int | str
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # x1, y1, x2, y2

    def to_json(self) -> str:
        return json.dumps(
            {"image_id": self.image_id, "class_id": self.class_id, "score": self.score, "box": list(self.box)}
        )

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(d["image_id"], int(d["class_id"]), float(d["score"]), tuple(float(v) for v in d["box"]))


def init_head(n_classes: int, dim_local: int, dim_global: int, rng, dtype=np.float32,
              cls_std: float = 0.01, reg_std: float = 0.001) -> dict[str, Tensor]:
    return {
        "head.cls.weight": Tensor(rng.normal(0, cls_std, (n_classes + 1, dim_local + dim_global)), requires_grad=True, dtype=dtype),
        "head.cls.bias": Tensor(np.zeros(n_classes + 1), requires_grad=True, dtype=dtype),
        "head.reg.weight": Tensor(rng.normal(0, reg_std, (4 * n_classes, dim_local)), requires_grad=True, dtype=dtype),
        "head.reg.bias": Tensor(np.zeros(4 * n_classes), requires_grad=True, dtype=dtype),
    }


def classify(F_L: Tensor, F_G: Tensor | None, params: dict[str, Tensor]) -> Tensor:
    """Raw class scores from [F_L, F_G]; F_G is per image and shared by all rows of F_L."""
    x = F_L
    if F_G is not None:
        if F_L.data.ndim == 2:
            x = T.concat([F_L, T.tile_rows(F_G, F_L.shape[0])], axis=-1)
        else:
            x = T.concat([F_L, F_G], axis=-1)
    return T.affine(x, params["head.cls.weight"], params["head.cls.bias"])


def regress(F_L: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-class box deltas (…, 4*K_cls) from the local feature only."""
    return T.affine(F_L, params["head.reg.weight"], params["head.reg.bias"])


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def multitask_loss(
    scores: Tensor,
    deltas: Tensor,
    targets: RoiTarget | Sequence[RoiTarget],
    reg_weight: float = 1.0,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """Mean over RoIs of CE(scores, g) + [g >= 1] * smooth-L1(deltas_g - t).

    Returns (J, J_cls, J_reg); J_reg is None when no RoI is foreground, and
    background rows never enter the regression graph.
    """
    if isinstance(targets, RoiTarget):
        targets = [targets]
        scores = T.reshape(scores, (1, -1))
        deltas = T.reshape(deltas, (1, -1))
    R, C = scores.shape
    n_cls = C - 1
    if deltas.shape != (R, 4 * n_cls):
        raise ValueError(f"deltas shape {deltas.shape} does not match scores {scores.shape}")
    labels = np.array([t.g for t in targets], dtype=np.int64)
    if labels.size != R:
        raise ValueError("one target per RoI required")
    if np.any(labels > n_cls):
        raise ValueError(f"class label out of range 0..{n_cls}")

    j_cls = T.scale(T.sum(T.cross_entropy(scores, labels)), 1.0 / R)
    fg = np.nonzero(labels >= 1)[0]
    if fg.size == 0:
        return j_cls, j_cls, None
    d3 = T.reshape(deltas, (R, n_cls, 4))
    picked = T.index(d3, (fg, labels[fg] - 1))
    tgt = Tensor(np.stack([targets[i].t for i in fg]), dtype=deltas.dtype)
    j_reg = T.scale(T.sum(T.smooth_l1(T.sub(picked, tgt))), reg_weight / R)
    return T.add(j_cls, j_reg), j_cls, j_reg


def nms(dets: Sequence[Detection], iou_thr: float = 0.3) -> list[Detection]:
    """Greedy suppression; ties in score keep input order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(iou(d.box, k.box) < iou_thr for k in kept):
            kept.append(d)
    return kept


def postprocess(
    image_id,
    proposals: np.ndarray,
    probs: np.ndarray,
    deltas: np.ndarray,
    image_w: int,
    image_h: int,
    score_thr: float = 0.05,
    nms_thr: float = 0.3,
    target_mean: np.ndarray | None = None,
    target_std: np.ndarray | None = None,
) -> list[Detection]:
    """Decode class-specific boxes, threshold scores, and run per-class NMS."""
    n_cls = probs.shape[1] - 1
    deltas = np.asarray(deltas, dtype=np.float64).reshape(len(proposals), n_cls, 4)
    if target_std is not None:
        deltas = deltas * target_std + (target_mean if target_mean is not None else 0.0)
    out: list[Detection] = []
    for c in range(1, n_cls + 1):
        keep = np.nonzero(probs[:, c] > score_thr)[0]
        if keep.size == 0:
            continue
        boxes = clip_corners(to_corners(decode_deltas(proposals[keep], deltas[keep, c - 1])), image_w, image_h)
        cand = [
            Detection(image_id, c, float(probs[k, c]), tuple(float(v) for v in b))
            for k, b in zip(keep, boxes)
            if b[2] > b[0] and b[3] > b[1]
        ]
        out.extend(nms(cand, nms_thr))
    return out


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(d.to_json() + "\n")


def read_detections(path) -> list[Detection]:
    with open(path, encoding="utf-8") as fh:
        return [Detection.from_dict(json.loads(line)) for line in fh if line.strip()]
