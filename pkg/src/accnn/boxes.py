"""Box types and geometry: center-size boxes, IoU, delta encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Center-size box in image pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def iou(a, b) -> float:
    """Intersection over union of two boxes (BBox or corner 4-sequences)."""
    ax1, ay1, ax2, ay2 = a.corners if isinstance(a, BBox) else a
    bx1, by1, bx2, by2 = b.corners if isinstance(b, BBox) else b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes a (N, 4) and b (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    """(N, 4) center-size rows to corner rows."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def to_center(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    wh = c[:, 2:] - c[:, :2]
    return np.concatenate([c[:, :2] + wh / 2, wh], axis=1)


def clip_corners(corners: np.ndarray, width: float, height: float) -> np.ndarray:
    c = np.array(corners, dtype=np.float64).reshape(-1, 4)
    c[:, [0, 2]] = np.clip(c[:, [0, 2]], 0, width)
    c[:, [1, 3]] = np.clip(c[:, [1, 3]], 0, height)
    return c


def scale_box(box: BBox, lam: float, image_w: int, image_h: int) -> BBox:
    """Scale a box about its center by ``lam``, then clip to the image.

    The clipped box is widened back to at least one pixel per side.
    """
    if lam <= 0:
        raise ValueError("scale factor must be positive")
    x1, y1, x2, y2 = box.corners
    if x2 <= 0 or y2 <= 0 or x1 >= image_w or y1 >= image_h:
        raise ValueError(f"box {box} lies outside the {image_w}x{image_h} image")
    w, h = lam * box.w, lam * box.h
    x1, x2 = max(0.0, box.cx - w / 2), min(float(image_w), box.cx + w / 2)
    y1, y2 = max(0.0, box.cy - h / 2), min(float(image_h), box.cy + h / 2)
    x1, x2 = _ensure_min_extent(x1, x2, float(image_w))
    y1, y2 = _ensure_min_extent(y1, y2, float(image_h))
    if (x1, y1, x2, y2) == (box.cx - w / 2, box.cy - h / 2, box.cx + w / 2, box.cy + h / 2):
        return BBox(box.cx, box.cy, w, h)
    return BBox.from_corners(x1, y1, x2, y2)


def _ensure_min_extent(lo: float, hi: float, limit: float) -> tuple[float, float]:
    if hi - lo >= 1.0:
        return lo, hi
    c = min(max((lo + hi) / 2, 0.5), limit - 0.5)
    return c - 0.5, c + 0.5


def encode_target(proposal: BBox, gt: BBox) -> np.ndarray:
    """Regression target (t_x, t_y, t_w, t_h) taking ``proposal`` to ``gt``."""
    return np.array(
        [
            (gt.cx - proposal.cx) / proposal.w,
            (gt.cy - proposal.cy) / proposal.h,
            math.log(gt.w / proposal.w),
            math.log(gt.h / proposal.h),
        ]
    )


def apply_deltas(box: BBox, t, image_w: float | None = None, image_h: float | None = None) -> BBox:
    """Inverse of :func:`encode_target`; clips when image extents are given."""
    tx, ty, tw, th = (float(v) for v in np.asarray(t).reshape(4))
    out = BBox(box.cx + tx * box.w, box.cy + ty * box.h, box.w * math.exp(tw), box.h * math.exp(th))
    if image_w is None or image_h is None:
        return out
    c = clip_corners(np.array(out.corners), image_w, image_h)[0]
    x1, x2 = _ensure_min_extent(c[0], c[2], image_w)
    y1, y2 = _ensure_min_extent(c[1], c[3], image_h)
    return BBox.from_corners(x1, y1, x2, y2)


def encode_targets(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`encode_target` over (N, 4) center-size rows."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    return np.stack(
        [
            (g[:, 0] - p[:, 0]) / p[:, 2],
            (g[:, 1] - p[:, 1]) / p[:, 3],
            np.log(g[:, 2] / p[:, 2]),
            np.log(g[:, 3] / p[:, 3]),
        ],
        axis=1,
    )


def decode_deltas(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorised :func:`apply_deltas` (no clipping); returns center-size rows."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    # guard exp overflow from untrained regressors
    tw = np.clip(t[:, 2], -10.0, 10.0)
    th = np.clip(t[:, 3], -10.0, 10.0)
    return np.stack(
        [p[:, 0] + t[:, 0] * p[:, 2], p[:, 1] + t[:, 1] * p[:, 3], p[:, 2] * np.exp(tw), p[:, 3] * np.exp(th)],
        axis=1,
    )
