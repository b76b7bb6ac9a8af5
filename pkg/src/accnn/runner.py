"""Training, evaluation, attention export and ablation runs."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from . import tensor as T
from .evaluation import (
    GroundTruth,
    categorize_false_positives,
    export_attention_map,
    metrics_report,
    write_category_csv,
)
from .head import write_detections
from .model import ACCNN
from .synth import (
    Sample,
    generate_corpus,
    label_rois,
    load_corpus,
    sample_minibatch,
    save_corpus,
    write_gt_jsonl,
)

log = logging.getLogger(__name__)

# class ids: 1 circle, 2 triangle, 3 square; the two polygons count as similar
SIMILARITY = {1: (), 2: (3,), 3: (2,)}

# reference mAPs from the VOC 2007 ablations, reported next to desk-scale numbers
VOC07_REFERENCE = {
    "full": 72.0,
    "minus_G": 71.4,
    "minus_L": 71.4,
    "avg_global": 71.6,
    "minus_G[0.8+1.2]": 71.3,
    "minus_G[1.2+1.8]": 71.1,
    "minus_G[0.8+1.2+1.8]": 71.4,
    "minus_G[0.8+1.2+1.8+2.7]": 71.6,
}


class NumericAbort(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainResult:
    model: ACCNN
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    log_path: Path | None = None


def _out_dir(cfg: C.RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _rel(a, out: Path) -> str:
    try:
        return str(Path(a).relative_to(out))
    except ValueError:
        return str(a)


def write_manifest(out: Path, cfg: C.RunConfig, artifacts: Sequence[Path | str], extra: dict | None = None) -> Path:
    path = out / "manifest.json"
    prev = json.loads(path.read_text()) if path.exists() else {"artifacts": []}
    names = list(dict.fromkeys(prev.get("artifacts", []) + [_rel(a, out) for a in artifacts]))
    doc = {"artifacts": names, "config": C.to_dict(cfg)}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_splits(cfg: C.RunConfig) -> tuple[list[Sample], list[Sample]]:
    """(train, test) samples from the corpus directory or generated in memory."""
    if cfg.data.corpus:
        root = Path(cfg.data.corpus)
        train = load_corpus(root / "train")
        test = load_corpus(root / "test") if (root / "test" / "annotations.jsonl").exists() else []
        return train, test
    d = cfg.data
    train = generate_corpus(d.seed, d.n_train, cfg.scene, split=0, workers=d.workers)
    test = generate_corpus(d.seed, d.n_test, cfg.scene, split=1, start_id=d.n_train, workers=d.workers)
    return train, test


def run_gen_data(cfg: C.RunConfig) -> Path:
    out = _out_dir(cfg)
    cfg.data.corpus = ""
    train, test = load_splits(cfg)
    save_corpus(out / "corpus" / "train", train)
    save_corpus(out / "corpus" / "test", test)
    write_gt_jsonl(out / "corpus" / "train" / "gt.jsonl", train)
    write_gt_jsonl(out / "corpus" / "test" / "gt.jsonl", test)
    write_manifest(out, cfg, ["corpus/train/annotations.jsonl", "corpus/test/annotations.jsonl",
                              "corpus/train/gt.jsonl", "corpus/test/gt.jsonl"])
    return out / "corpus"


def target_statistics(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Mean / std of encoded deltas over all foreground proposals."""
    rows = []
    for s in samples:
        labels, targets, _ = label_rois(s, s.proposals)
        rows.append(targets[labels >= 1])
    t = np.concatenate(rows) if rows else np.zeros((0, 4))
    if len(t) < 2:
        return np.zeros(4), np.ones(4)
    std = t.std(axis=0)
    return t.mean(axis=0), np.where(std > 1e-6, std, 1.0)


def lr_at(cfg: C.TrainConfig, it: int) -> float:
    return cfg.lr * cfg.decay_factor ** (it // cfg.decay_step if cfg.decay_step > 0 else 0)


def sgd_step(model: ACCNN, velocity: dict[str, np.ndarray], lr: float, cfg: C.TrainConfig) -> None:
    """Momentum SGD; weight decay on weight matrices only."""
    for name, p in model.params.items():
        g = p.grad
        if cfg.weight_decay and name.endswith(".weight"):
            g = g + cfg.weight_decay * p.data
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        v *= cfg.momentum
        v += (lr * g).astype(v.dtype, copy=False)
        p.data -= v


def _batch_seed(seed: int, it: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), 7, int(it)])


def run_train(cfg: C.RunConfig, samples: Sequence[Sample] | None = None, write: bool = True) -> TrainResult:
    """Train with momentum SGD and a step learning-rate schedule.

    Writes ``model.ckpt``, ``train_log.jsonl`` (deterministic per seed) and
    ``train_timing.jsonl`` (wall-clock) under ``cfg.out``.
    """
    tc = cfg.train
    if samples is None:
        samples, _ = load_splits(cfg)
    samples = list(samples)
    if len(samples) < tc.images_per_batch:
        raise C.ConfigError("not enough training images")
    model = ACCNN(cfg.model, seed=cfg.seed)
    if tc.normalize_targets:
        model.target_mean, model.target_std = target_statistics(samples)

    # warm-up amplitude calibration of the per-scale L2 scales
    warm, seen = [], 0
    with T.no_grad():
        for s in samples:
            if seen >= tc.warmup_proposals:
                break
            warm.append((model.cube(s.image), s.proposals, s.width, s.height))
            seen += len(s.proposals)
    from .local_context import calibrate_norm_scale

    calibrate_norm_scale(model.params, model.cfg.effective_local(), warm, tc.warmup_proposals)

    order_rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 3]))
    order: list[int] = []
    velocity: dict[str, np.ndarray] = {}
    records: list[dict] = []
    timings: list[dict] = []
    out = _out_dir(cfg) if write else None
    t0 = time.time()
    for it in range(tc.iters):
        if len(order) < tc.images_per_batch:
            order.extend(int(i) for i in order_rng.permutation(len(samples)))
        picks = [samples[order.pop(0)] for _ in range(tc.images_per_batch)]
        batch = sample_minibatch(picks, _batch_seed(cfg.seed, it), tc.images_per_batch, tc.rois_per_batch,
                                 tc.fg_fraction, (tc.bg_lo, tc.bg_hi), tc.flip)
        model.zero_grad()
        total = cls_total = None
        reg_total = 0.0
        for im in batch.images:
            J, J_cls, J_reg, _ = model.loss(im.sample.image, im.rois, im.labels, im.targets, tc.rois_per_batch)
            total = J if total is None else T.add(total, J)
            cls_total = J_cls.item() + (cls_total or 0.0)
            reg_total += J_reg.item() if J_reg is not None else 0.0
        loss = total.item()
        lr = lr_at(tc, it)
        if not math.isfinite(loss):
            if out is not None:
                _dump_diagnostic(out, it, batch, loss)
            raise NumericAbort(f"non-finite loss {loss} at iteration {it}")
        T.backward(total)
        sgd_step(model, velocity, lr, tc)
        records.append({"iter": it, "loss": loss, "loss_cls": cls_total, "loss_reg": reg_total, "lr": lr})
        timings.append({"iter": it, "timestamp": time.time(), "elapsed": time.time() - t0})
        if it % 100 == 0:
            log.info("iter %d loss %.4f (cls %.4f reg %.4f) lr %g", it, loss, cls_total, reg_total, lr)

    result = TrainResult(model, records)
    if out is not None:
        result.checkpoint = out / "model.ckpt"
        model.save(result.checkpoint)
        result.log_path = out / "train_log.jsonl"
        with open(result.log_path, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r) + "\n")
        with open(out / "train_timing.jsonl", "w", encoding="utf-8") as fh:
            for r in timings:
                fh.write(json.dumps(r) + "\n")
        (out / "config.txt").write_text(C.dumps(cfg), encoding="utf-8")
        write_manifest(out, cfg, ["model.ckpt", "train_log.jsonl", "train_timing.jsonl", "config.txt"])
    return result


def _dump_diagnostic(out: Path, it: int, batch, loss: float) -> None:
    doc = {
        "iter": it,
        "loss": repr(loss),
        "images": [
            {
                "image_id": im.sample.image_id,
                "flipped": im.flipped,
                "labels": im.labels.tolist(),
                "rois": [[b.cx, b.cy, b.w, b.h] for b in im.rois],
            }
            for im in batch.images
        ],
    }
    (out / "diagnostic.json").write_text(json.dumps(doc) + "\n")


def load_model(checkpoint, cfg: C.RunConfig) -> ACCNN:
    model = ACCNN(cfg.model, seed=cfg.seed)
    model.load(checkpoint)
    return model


def detect_all(model: ACCNN, samples: Sequence[Sample], cfg: C.RunConfig):
    dets = []
    for s in samples:
        dets.extend(model.detect(s.image, s.proposals, s.image_id, cfg.eval.score_thr, cfg.eval.nms_thr))
    gts = [GroundTruth(s.image_id, c, b.corners) for s in samples for c, b in s.gts]
    return dets, gts


def evaluate_model(model: ACCNN, samples: Sequence[Sample], cfg: C.RunConfig) -> dict:
    dets, gts = detect_all(model, samples, cfg)
    classes = range(1, cfg.model.n_classes + 1)
    return metrics_report(dets, gts, classes, cfg.eval.ap_mode, cfg.eval.iou_thr)


def run_eval(checkpoint, samples: Sequence[Sample] | None, cfg: C.RunConfig, write: bool = True) -> dict:
    """Inference + mAP + top-N error categories on a held-out set."""
    model = checkpoint if isinstance(checkpoint, ACCNN) else load_model(checkpoint, cfg)
    if samples is None:
        _, samples = load_splits(cfg)
    dets, gts = detect_all(model, samples, cfg)
    classes = list(range(1, cfg.model.n_classes + 1))
    report = metrics_report(dets, gts, classes, cfg.eval.ap_mode, cfg.eval.iou_thr)
    cats = categorize_false_positives(dets, gts, SIMILARITY, classes)
    if write:
        out = _out_dir(cfg)
        write_detections(out / "detections.jsonl", dets)
        with open(out / "gt.jsonl", "w", encoding="utf-8") as fh:
            for g in gts:
                fh.write(json.dumps({"image_id": g.image_id, "class_id": g.class_id, "box": list(g.box)}) + "\n")
        (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
        names = {i + 1: n for i, n in enumerate(cfg.scene.classes)}
        write_category_csv(out / "categories.csv", cats, names)
        write_manifest(out, cfg, ["detections.jsonl", "gt.jsonl", "metrics.json", "categories.csv"])
    report = dict(report)
    report["categories"] = {str(k): v for k, v in cats.items()}
    return report


def run_attend(checkpoint, samples: Sequence[Sample] | None, cfg: C.RunConfig) -> list[Path]:
    """Export every attention map (l_1 .. l_{T+1}) per image as CSV + P5."""
    if not cfg.model.uses_global or cfg.model.effective_global().mode != "attention":
        raise C.ConfigError("attention maps need an attention-mode global branch (variant full or minus_L)")
    model = checkpoint if isinstance(checkpoint, ACCNN) else load_model(checkpoint, cfg)
    if samples is None:
        _, samples = load_splits(cfg)
    if cfg.attend.max_images:
        samples = list(samples)[: cfg.attend.max_images]
    out = _out_dir(cfg) / "attention"
    K = cfg.model.global_.K
    files: list[Path] = []
    for s in samples:
        for t, m in enumerate(model.attention_maps(s.image), start=1):
            files.extend(export_attention_map(m, K, out / f"{s.image_id}_l{t}", cfg.attend.size))
    write_manifest(_out_dir(cfg), cfg, files)
    return files


SCALE_SETS = ((0.8, 1.2), (1.2, 1.8), (0.8, 1.2, 1.8), (0.8, 1.2, 1.8, 2.7))


def _scale_label(scales) -> str:
    return "+".join(f"{s:g}" for s in scales)


def run_ablate(cfg: C.RunConfig, variants: Sequence[str] = ("full", "minus_G", "minus_L", "avg_global"),
               scale_sets: Sequence[tuple[float, ...]] = SCALE_SETS, seeds: Sequence[int] = (0, 1, 2),
               write: bool = True) -> list[dict]:
    """Train and evaluate each variant / scale set on identical seeds."""
    train, test = load_splits(cfg)
    runs: list[tuple[str, C.RunConfig]] = []
    for v in variants:
        c = copy.deepcopy(cfg)
        c.model.variant = v
        runs.append((v, c))
    for scales in scale_sets:
        c = copy.deepcopy(cfg)
        c.model.variant = "minus_G"
        c.model.local = replace(c.model.local, scales=tuple(scales))
        runs.append((f"minus_G[{_scale_label(scales)}]", c))
    rows = []
    for label, c in runs:
        for seed in seeds:
            c2 = copy.deepcopy(c)
            c2.seed = seed
            model = run_train(c2, train, write=False).model
            rep = evaluate_model(model, test, c2)
            rows.append({"variant": label, "seed": seed, "mAP": rep["map"]})
            log.info("ablation %s seed %d: mAP %.4f", label, seed, rep["map"])
    if write:
        out = _out_dir(cfg)
        with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["variant", "seed", "mAP"])
            w.writeheader()
            w.writerows(rows)
        with open(out / "ablation_summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "mean_mAP", "n_seeds", "reference_voc07_mAP"])
            for label, _ in runs:
                vals = [r["mAP"] for r in rows if r["variant"] == label]
                w.writerow([label, float(np.mean(vals)), len(vals), VOC07_REFERENCE.get(label, "")])
        write_manifest(out, cfg, ["ablation.csv", "ablation_summary.csv"])
    return rows
