"""Synthetic shapes corpus, jittered proposals and minibatch sampling.

Images hold circles, triangles and squares on two background families.
Backgrounds carry class co-occurrence: triangles only appear on smooth
gradient backgrounds and squares only on noise textures, circles on both,
so the whole-image view is informative about ambiguous objects.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import BBox, encode_target, iou, iou_matrix, to_corners
from .pnm import read_ppm, write_ppm

log = logging.getLogger(__name__)

CLASSES = ("circle", "triangle", "square")
BACKGROUNDS = ("gradient", "noise")
# class probabilities per background; marginals come out uniform
_CONTEXT_PRIOR = {
    "gradient": {"circle": 1 / 3, "triangle": 2 / 3},
    "noise": {"circle": 1 / 3, "square": 2 / 3},
}


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 128
    classes: tuple[str, ...] = CLASSES
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (14, 44)
    occlusion_prob: float = 0.25
    context_rule: bool = True
    n_proposals: int = 160

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ValueError("objects_per_image must satisfy 1 <= lo <= hi")
        if self.size_range[0] < 8:
            raise ValueError("minimum object size is 8 pixels")
        if min(self.width, self.height) < self.size_range[1]:
            raise ValueError("objects larger than the canvas")

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32, values are multiples of 1/255
    gts: list[tuple[int, BBox]]  # (class id >= 1, box)
    proposals: list[BBox]
    image_id: int | str = 0
    background: str = ""

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    def gt_corners(self) -> np.ndarray:
        return to_corners(np.array([b.as_array() for _, b in self.gts]).reshape(-1, 4))

    def proposal_array(self) -> np.ndarray:
        return np.array([b.as_array() for b in self.proposals]).reshape(-1, 4)


# ---------------------------------------------------------------------------
# rendering


def _background(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    if kind == "gradient":
        c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
        img = c0 + (c1 - c0) * ramp[..., None]
        return img + rng.normal(0, 0.01, (h, w, 3))
    base = rng.uniform(0.25, 0.75, 3)
    noise = rng.uniform(-1, 1, (h // 4 + 2, w // 4 + 2, 3))
    tex = np.kron(noise, np.ones((4, 4, 1)))[:h, :w]
    return base + 0.18 * tex + rng.normal(0, 0.04, (h, w, 3))


def _mask(kind: str, cx: float, cy: float, size: float, angle: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx * dx + dy * dy <= (size / 2) ** 2
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "square":
        half = size / 2 / np.sqrt(2) * 1.2
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # equilateral-ish triangle with circumradius size/2
    r = size / 2
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        a = angle + k * 2 * np.pi / 3
        nx, ny = np.cos(a), np.sin(a)
        inside &= (dx * nx + dy * ny) <= r / 2
    return inside


def _pick_color(bg_mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    for _ in range(50):
        c = rng.uniform(0, 1, 3)
        if np.abs(c - bg_mean).mean() > 0.3:
            return c
    return 1.0 - bg_mean


def generate_image(seed, spec: SceneSpec | None = None, image_id: int | str = 0) -> Sample:
    """Render one scene; identical seeds give bitwise-identical samples."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    if n_obj * spec.size_range[0] ** 2 > 0.6 * h * w:
        raise ValueError(f"scene infeasible: {n_obj} objects of size >= {spec.size_range[0]} on {w}x{h}")

    kind_bg = BACKGROUNDS[int(rng.integers(0, 2))]
    img = _background(kind_bg, rng, h, w)
    if spec.context_rule and set(spec.classes) == set(CLASSES):
        prior = _CONTEXT_PRIOR[kind_bg]
        names, probs = list(prior), np.array(list(prior.values()))
    else:
        names, probs = list(spec.classes), np.full(spec.n_classes, 1 / spec.n_classes)

    gts: list[tuple[int, BBox]] = []
    placed: list[np.ndarray] = []
    for k in range(n_obj):
        name = names[int(rng.choice(len(names), p=probs))]
        cls = spec.classes.index(name) + 1
        for _attempt in range(200):
            size = rng.uniform(*spec.size_range)
            occlude = bool(placed) and rng.uniform() < spec.occlusion_prob
            if occlude:
                px1, py1, px2, py2 = placed[-1]
                off = rng.uniform(0.5, 0.8) * size * np.array([rng.choice([-1, 1]), rng.choice([-1, 1])])
                cx, cy = (px1 + px2) / 2 + off[0], (py1 + py2) / 2 + off[1]
            else:
                cx, cy = rng.uniform(size / 2 + 1, w - size / 2 - 1), rng.uniform(size / 2 + 1, h - size / 2 - 1)
            angle = rng.uniform(0, 2 * np.pi) if name != "circle" else 0.0
            m = _mask(name, cx, cy, size, angle, h, w)
            ys, xs = np.nonzero(m)
            if ys.size == 0:
                continue
            box = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)
            if box[2] - box[0] < 8 or box[3] - box[1] < 8:
                continue
            if box[0] < 0 or box[1] < 0 or box[2] > w or box[3] > h:
                continue
            if placed:
                ov = iou_matrix(box[None], np.array(placed))[0]
                limit = 0.45 if occlude else 0.0
                if ov.max() > limit:
                    continue
            break
        else:
            raise ValueError("scene infeasible: could not place objects without heavy overlap")
        color = _pick_color(img[int(box[1]) : int(box[3]), int(box[0]) : int(box[2])].reshape(-1, 3).mean(0), rng)
        img[m] = color + rng.normal(0, 0.02, (int(m.sum()), 3))
        placed.append(box)
        gts.append((cls, BBox.from_corners(*box)))

    image = (np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8) / 255.0).astype(np.float32)
    props = generate_proposals(gts, rng.integers(0, 2**63), spec.n_proposals, w, h)
    return Sample(image, gts, props, image_id, kind_bg)


# ---------------------------------------------------------------------------
# proposals


def _jitter(box: BBox, sigma: float, rng) -> BBox:
    cx = box.cx + rng.normal(0, sigma) * box.w
    cy = box.cy + rng.normal(0, sigma) * box.h
    bw = box.w * np.exp(rng.normal(0, sigma))
    bh = box.h * np.exp(rng.normal(0, sigma))
    return BBox(cx, cy, bw, bh)


def _q(v: float) -> float:
    # eighth-pixel grid keeps mirror arithmetic exact
    return round(v * 8) / 8


def _clip_into(box: BBox, w: int, h: int) -> BBox | None:
    x1, y1, x2, y2 = (_q(v) for v in box.corners)
    x1, y1, x2, y2 = max(0.0, x1), max(0.0, y1), min(float(w), x2), min(float(h), y2)
    if x2 - x1 < 2 or y2 - y1 < 2:
        return None
    return BBox.from_corners(x1, y1, x2, y2)


def _sample_band(gt: BBox, lo: float, hi: float, sigma: float, rng, w, h, fallback) -> BBox:
    for _ in range(100):
        b = _clip_into(_jitter(gt, sigma, rng), w, h)
        if b is not None and lo <= iou(b, gt) < hi:
            return b
    return fallback


def _shifted(gt: BBox, w: int, h: int) -> BBox:
    # half-width horizontal shift: IoU 1/3 before clipping
    for sign in (1, -1):
        b = _clip_into(BBox(gt.cx + sign * gt.w / 2, gt.cy, gt.w, gt.h), w, h)
        if b is not None and 0.1 <= iou(b, gt) < 0.5:
            return b
    return _clip_into(BBox(gt.cx, gt.cy, gt.w * 0.55, gt.h * 0.55), w, h) or gt


def generate_proposals(gts: Sequence[tuple[int, BBox]], seed, n: int, image_w: int = 128, image_h: int = 128) -> list[BBox]:
    """GT jitters across an IoU spectrum plus uniform random boxes.

    Every GT gets at least one proposal with IoU >= 0.7 and one distractor
    with IoU in [0.1, 0.5), provided ``n >= 2 * len(gts)``.
    """
    if n < 2 * len(gts):
        raise ValueError(f"need n >= 2 x #gt, got n={n} for {len(gts)} objects")
    rng = np.random.default_rng(seed)
    boxes = [b for _, b in gts]
    per_gt: list[list[BBox]] = []
    for gt in boxes:
        high = _sample_band(gt, 0.7, 1.01, 0.05, rng, image_w, image_h, gt)
        low = _sample_band(gt, 0.1, 0.5, 0.35, rng, image_w, image_h, _shifted(gt, image_w, image_h))
        extra = [high, low]
        extra.append(_sample_band(gt, 0.7, 1.01, 0.08, rng, image_w, image_h, gt))
        extra.append(_sample_band(gt, 0.1, 0.5, 0.4, rng, image_w, image_h, _shifted(gt, image_w, image_h)))
        for sigma in np.tile([0.04, 0.06, 0.08, 0.1, 0.12, 0.15, 0.18, 0.22, 0.26, 0.32], 2):
            b = _clip_into(_jitter(gt, sigma, rng), image_w, image_h)
            extra.append(b if b is not None else gt)
        per_gt.append(extra)

    out: list[BBox] = []
    budget = min(n, max(2 * len(boxes), n // 2))
    for rank in range(max((len(e) for e in per_gt), default=0)):
        for extra in per_gt:
            if rank < len(extra) and len(out) < budget:
                out.append(extra[rank])
    while len(out) < n:
        bw, bh = rng.uniform(8, 64), rng.uniform(8, 64)
        cx, cy = rng.uniform(0, image_w), rng.uniform(0, image_h)
        b = _clip_into(BBox(cx, cy, bw, bh), image_w, image_h)
        if b is not None and b.w >= 4 and b.h >= 4:
            out.append(b)
    return out


# ---------------------------------------------------------------------------
# corpus


def _child_seed(master: int, split: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(split), int(index)])


def _generate_one(args) -> Sample:
    master, split, i, spec, image_id = args
    return generate_image(_child_seed(master, split, i), spec, image_id=image_id)


def generate_corpus(master_seed: int, n: int, spec: SceneSpec | None = None, split: int = 0,
                    start_id: int = 0, workers: int = 1) -> list[Sample]:
    """``n`` scenes seeded per index, so ``workers > 1`` returns identical output."""
    spec = spec or SceneSpec()
    jobs = [(master_seed, split, i, spec, start_id + i) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_generate_one, jobs, chunksize=16))
    return [_generate_one(j) for j in jobs]


def flip_augment(sample: Sample, coin: int | bool) -> Sample:
    """Horizontal mirror of image, GT boxes and proposals when ``coin`` is truthy."""
    if not coin:
        return sample
    w = sample.width
    mirror = lambda b: BBox(w - b.cx, b.cy, b.w, b.h)  # noqa: E731
    return replace(
        sample,
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        gts=[(c, mirror(b)) for c, b in sample.gts],
        proposals=[mirror(b) for b in sample.proposals],
    )


@dataclass
class ImageRois:
    sample: Sample  # after augmentation
    rois: list[BBox]
    labels: np.ndarray  # (R,) int, 0 = background
    targets: np.ndarray  # (R, 4) raw encoded deltas, zeros for background
    overlaps: np.ndarray  # (R,) max IoU with any GT
    flipped: bool = False


@dataclass
class Batch:
    images: list[ImageRois] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([im.labels for im in self.images])


def label_rois(sample: Sample, rois: Sequence[BBox]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Max-IoU GT assignment: (labels with IoU > 0.5 else 0, targets, overlaps)."""
    if not rois:
        return np.zeros(0, np.int64), np.zeros((0, 4)), np.zeros(0)
    roi_c = to_corners(np.array([b.as_array() for b in rois]))
    ov = iou_matrix(roi_c, sample.gt_corners())
    best = ov.argmax(axis=1)
    overlaps = ov.max(axis=1)
    labels = np.zeros(len(rois), np.int64)
    targets = np.zeros((len(rois), 4))
    for r in range(len(rois)):
        if overlaps[r] > 0.5:
            cls, gt = sample.gts[best[r]]
            labels[r] = cls
            targets[r] = encode_target(rois[r], gt)
    return labels, targets, overlaps


def sample_rois(sample: Sample, n_rois: int, rng: np.random.Generator, fg_fraction: float = 0.25,
                fg_thr: float = 0.5, bg_range: tuple[float, float] = (0.0, 0.5)) -> ImageRois:
    cands = list(sample.proposals) + [b for _, b in sample.gts]
    _, _, ov = label_rois(sample, cands)
    n_fg = int(round(n_rois * fg_fraction))
    fg_idx = np.nonzero(ov > fg_thr)[0]
    bg_idx = np.nonzero((ov >= bg_range[0]) & (ov < bg_range[1]))[0]

    if fg_idx.size >= n_fg:
        fg = [cands[i] for i in rng.choice(fg_idx, n_fg, replace=False)]
    else:
        log.warning("image %s: %d foreground candidates for %d slots; refilling with jitters",
                    sample.image_id, fg_idx.size, n_fg)
        fg = [cands[i] for i in fg_idx]
        gt_boxes = [b for _, b in sample.gts]
        while len(fg) < n_fg:
            gt = gt_boxes[int(rng.integers(len(gt_boxes)))]
            fg.append(_sample_band(gt, 0.7, 1.01, 0.05, rng, sample.width, sample.height, gt))
    n_bg = n_rois - n_fg
    if bg_idx.size == 0:
        raise ValueError(f"image {sample.image_id}: no background candidates")
    bg = [cands[i] for i in rng.choice(bg_idx, n_bg, replace=bg_idx.size < n_bg)]

    rois = fg + bg
    labels, targets, overlaps = label_rois(sample, rois)
    # background slots stay background even if a jitter refill crossed the threshold
    labels[n_fg:] = 0
    targets[n_fg:] = 0.0
    return ImageRois(sample, rois, labels, targets, overlaps)


def sample_minibatch(samples: Sequence[Sample], seed, images_per_batch: int = 2, rois_per_batch: int = 128,
                     fg_fraction: float = 0.25, bg_range: tuple[float, float] = (0.0, 0.5),
                     flip: bool = True) -> Batch:
    """Pick images, flip each with probability 0.5, and draw a fixed fg/bg RoI mix."""
    if len(samples) < images_per_batch:
        raise ValueError(f"need at least {images_per_batch} images, got {len(samples)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(samples), images_per_batch, replace=False)
    per_image = rois_per_batch // images_per_batch
    batch = Batch()
    for i in picks:
        coin = bool(rng.integers(0, 2)) if flip else False
        s = flip_augment(samples[int(i)], coin)
        im = sample_rois(s, per_image, rng, fg_fraction, bg_range=bg_range)
        im.flipped = coin
        batch.images.append(im)
    return batch


# ---------------------------------------------------------------------------
# persistence


def save_corpus(directory, samples: Sequence[Sample], name: str = "annotations.jsonl") -> Path:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    with open(d / name, "w", encoding="utf-8") as fh:
        for s in samples:
            fname = f"images/{s.image_id}.ppm"
            write_ppm(d / fname, s.image)
            rec = {
                "image_id": s.image_id,
                "file": fname,
                "width": s.width,
                "height": s.height,
                "background": s.background,
                "gts": [{"class_id": c, "box": [b.cx, b.cy, b.w, b.h]} for c, b in s.gts],
                "proposals": [[b.cx, b.cy, b.w, b.h] for b in s.proposals],
            }
            fh.write(json.dumps(rec) + "\n")
    return d / name


def load_corpus(directory, name: str = "annotations.jsonl") -> list[Sample]:
    d = Path(directory)
    out = []
    with open(d / name, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                Sample(
                    read_ppm(d / rec["file"]),
                    [(int(g["class_id"]), BBox(*g["box"])) for g in rec["gts"]],
                    [BBox(*p) for p in rec["proposals"]],
                    rec["image_id"],
                    rec.get("background", ""),
                )
            )
    return out


def gt_records(samples: Sequence[Sample]) -> list[dict]:
    """Ground truth in the evaluator's JSON-lines schema."""
    return [
        {"image_id": s.image_id, "class_id": c, "box": list(b.corners)} for s in samples for c, b in s.gts
    ]


def write_gt_jsonl(path, samples: Sequence[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in gt_records(samples):
            fh.write(json.dumps(rec) + "\n")


def corpus_exists(directory) -> bool:
    return os.path.exists(os.path.join(directory, "train", "annotations.jsonl"))
