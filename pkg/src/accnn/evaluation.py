"""PASCAL-style AP/mAP, top-N false-positive analysis, attention map export."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .boxes import BBox, iou
from .head import Detection
from .pnm import write_pgm

log = logging.getLogger(__name__)

AP_MODES = ("all-points", "11-point")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int | str
    class_id: int
    box: tuple[float, float, float, float]  # x1, y1, x2, y2

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(d["image_id"], int(d["class_id"]), tuple(float(v) for v in d["box"]))


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    score: float


class FPCategory(str, Enum):
    COR = "Cor"
    LOC = "Loc"
    SIM = "Sim"
    OTH = "Oth"
    BG = "BG"


def _corners(b):
    return b.corners if isinstance(b, BBox) else tuple(b)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int,
                     iou_thr: float = 0.5) -> tuple[list[Detection], np.ndarray, int]:
    """Greedy score-ordered matching for one class.

    Returns (detections sorted by score, tp flags, number of GTs).  Each GT
    absorbs at most one detection; later hits on it are false positives.
    """
    cd = sorted((d for d in dets if d.class_id == class_id), key=lambda d: -d.score)
    by_image: dict = defaultdict(list)
    for g in gts:
        if g.class_id == class_id:
            by_image[g.image_id].append(g)
    used = {k: [False] * len(v) for k, v in by_image.items()}
    tp = np.zeros(len(cd), dtype=bool)
    for i, d in enumerate(cd):
        cands = by_image.get(d.image_id, [])
        if not cands:
            continue
        ious = [iou(d.box, g.box) for g in cands]
        j = int(np.argmax(ious))
        if ious[j] >= iou_thr and not used[d.image_id][j]:
            used[d.image_id][j] = True
            tp[i] = True
    return cd, tp, sum(len(v) for v in by_image.values())


def pr_curve(dets, gts, class_id, iou_thr: float = 0.5) -> list[PRPoint]:
    cd, tp, n_gt = match_detections(dets, gts, class_id, iou_thr)
    ctp = np.cumsum(tp)
    out = []
    for k, d in enumerate(cd):
        out.append(PRPoint(ctp[k] / n_gt if n_gt else 0.0, ctp[k] / (k + 1), d.score))
    return out


def ap_from_pr(recall: np.ndarray, precision: np.ndarray, mode: str = "all-points") -> float:
    if mode == "11-point":
        ap = 0.0
        for i in range(11):
            t = i / 10  # linspace would give 0.30000000000000004
            p = precision[recall >= t].max() if np.any(recall >= t) else 0.0
            ap += p / 11
        return float(ap)
    if mode != "all-points":
        raise ValueError(f"unknown AP mode {mode!r}; use one of {AP_MODES}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(dets, gts, class_id: int, iou_thr: float = 0.5, mode: str = "all-points") -> float | None:
    """AP of one class; ``None`` when the class has no ground truth."""
    cd, tp, n_gt = match_detections(dets, gts, class_id, iou_thr)
    if n_gt == 0:
        return None
    ctp = np.cumsum(tp).astype(np.float64)
    k = np.arange(1, len(cd) + 1, dtype=np.float64)
    return ap_from_pr(ctp / n_gt, ctp / np.maximum(k, 1), mode)


def per_class_ap(dets, gts, classes: Iterable[int], iou_thr: float = 0.5, mode: str = "all-points") -> dict[int, float | None]:
    return {c: average_precision(dets, gts, c, iou_thr, mode) for c in classes}


def mean_ap(dets, gts, classes: Iterable[int], iou_thr: float = 0.5, mode: str = "all-points") -> float:
    """Unweighted mean of AP over classes that have ground truth."""
    aps = per_class_ap(dets, gts, classes, iou_thr, mode)
    defined = [v for v in aps.values() if v is not None]
    for c, v in aps.items():
        if v is None:
            log.info("class %s has no ground truth; excluded from mAP", c)
    if not defined:
        raise ValueError("no class has ground truth")
    return float(np.mean(defined))


def metrics_report(dets, gts, classes, mode: str = "all-points", iou_thr: float = 0.5) -> dict:
    aps = per_class_ap(dets, gts, classes, iou_thr, mode)
    defined = [v for v in aps.values() if v is not None]
    return {
        "per_class_ap": {str(c): v for c, v in aps.items()},
        "map": float(np.mean(defined)) if defined else None,
        "mode": mode,
    }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_class_ap", "map", "mode"],
    "properties": {
        "per_class_ap": {"type": "object", "additionalProperties": {"type": ["number", "null"], "minimum": 0, "maximum": 1}},
        "map": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "mode": {"enum": list(AP_MODES)},
    },
}


# ---------------------------------------------------------------------------
# error analysis


def categorize_false_positives(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    similarity_map: Mapping[int, Iterable[int]],
    classes: Iterable[int] | None = None,
) -> dict[int, dict[str, int]]:
    """Label the top-N detections of each class (N = #GT of the class).

    Priority: Cor (matched, IoU >= 0.5), Loc (same class, IoU in [0.1, 0.5)
    or a duplicate hit), Sim (IoU >= 0.1 with a similar-class GT), Oth (IoU
    >= 0.1 with any other GT), BG.
    """
    classes = sorted({g.class_id for g in gts} if classes is None else classes)
    result: dict[int, dict[str, int]] = {}
    for c in classes:
        n = sum(1 for g in gts if g.class_id == c)
        if n == 0:
            continue
        labels = label_top_detections(dets, gts, c, set(similarity_map.get(c, ())))
        counts = {cat.value: 0 for cat in FPCategory}
        for cat in labels[:n]:
            counts[cat.value] += 1
        result[c] = counts
    return result


def label_top_detections(dets, gts, class_id: int, similar: set[int]) -> list[FPCategory]:
    cd, tp, _ = match_detections(dets, gts, class_id, 0.5)
    by_image: dict = defaultdict(list)
    for g in gts:
        by_image[g.image_id].append(g)
    out = []
    for d, is_tp in zip(cd, tp):
        if is_tp:
            out.append(FPCategory.COR)
            continue
        own = sim = oth = 0.0
        for g in by_image.get(d.image_id, []):
            o = iou(d.box, g.box)
            if g.class_id == class_id:
                own = max(own, o)
            elif g.class_id in similar:
                sim = max(sim, o)
            else:
                oth = max(oth, o)
        if own >= 0.1:
            out.append(FPCategory.LOC)
        elif sim >= 0.1:
            out.append(FPCategory.SIM)
        elif oth >= 0.1:
            out.append(FPCategory.OTH)
        else:
            out.append(FPCategory.BG)
    return out


def write_category_csv(path, counts: Mapping[int, Mapping[str, int]], names: Mapping[int, str] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class_name"] + [c.value for c in FPCategory])
        for c, row in counts.items():
            w.writerow([c, (names or {}).get(c, str(c))] + [row[k.value] for k in FPCategory])


# ---------------------------------------------------------------------------
# attention maps


def export_attention_map(att_map: np.ndarray, K: int, out_path, size: int | None = None) -> tuple[Path, Path]:
    """Write ``<out_path>.csv`` (K x K grid) and ``<out_path>.pgm`` (max -> 255).

    ``size`` upsamples the graymap by nearest neighbour to size x size.
    """
    m = np.asarray(att_map, dtype=np.float64).reshape(K, K)
    base = Path(out_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = base.with_suffix(".csv"), base.with_suffix(".pgm")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in m:
            w.writerow([repr(float(v)) for v in row])
    peak = m.max()
    gray = np.rint(m / peak * 255).astype(np.uint8) if peak > 0 else np.zeros((K, K), np.uint8)
    if size is not None and size != K:
        idx = (np.arange(size) * K) // size
        gray = gray[idx][:, idx]
    write_pgm(pgm_path, gray)
    return csv_path, pgm_path


def read_attention_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])


# ---------------------------------------------------------------------------
# JSON-lines I/O


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_ground_truth(path) -> list[GroundTruth]:
    return [GroundTruth.from_dict(d) for d in read_jsonl(path)]
