"""COCO-style detection metrics: mAP@[.50:.95] and mAP50 with 101-point interpolation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .detector import BoxLabel, boxes_xyxy, decode_predictions, iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    per_class_ap: dict[int, dict[float, float]]
    map_5095: float
    map_50: float
    counts: dict[str, int] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", *[f"AP@{t:.2f}" for t in IOU_THRESHOLDS], "AP@[.50:.95]"])
        for cls in sorted(self.per_class_ap):
            aps = [self.per_class_ap[cls][t] for t in IOU_THRESHOLDS]
            w.writerow([cls, *[f"{a:.6f}" for a in aps], f"{np.mean(aps):.6f}"])
        w.writerow([])
        w.writerow(["mAP", f"{self.map_5095:.6f}"])
        w.writerow(["mAP50", f"{self.map_50:.6f}"])
        for k in ("tp", "fp", "fn"):
            w.writerow([k.upper(), self.counts.get(k, 0)])
        return buf.getvalue()

    def summary(self, class_names: Sequence[str] | None = None) -> str:
        lines = [f"mAP@[.50:.95] = {self.map_5095:.4f}", f"mAP50        = {self.map_50:.4f}",
                 f"TP/FP/FN @0.50 = {self.counts.get('tp', 0)}/{self.counts.get('fp', 0)}/"
                 f"{self.counts.get('fn', 0)}"]
        for cls in sorted(self.per_class_ap):
            name = class_names[cls] if class_names and cls < len(class_names) else str(cls)
            ap = self.per_class_ap[cls]
            lines.append(f"  {name:<10s} AP50={ap[0.5]:.4f}  AP={np.mean(list(ap.values())):.4f}")
        return "\n".join(lines)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a confidence-sorted TP indicator array."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # envelope: precision non-increasing in recall
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    return float(np.mean([precision[i] if i < len(precision) else 0.0 for i in idx]))


def match_class(preds: Sequence[BoxLabel], gts: Sequence[BoxLabel], thr: float) -> np.ndarray:
    """Greedy matching by descending confidence; ties keep the original prediction order.

    Each prediction takes the unmatched same-image ground truth with the largest IoU
    at or above ``thr``. Returns the TP indicator in sorted order.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    by_image: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.batch_index, []).append(j)
    gt_boxes = boxes_xyxy(gts)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(preds))
    for rank, i in enumerate(order):
        cand = by_image.get(preds[i].batch_index, [])
        if not cand:
            continue
        ious = iou_matrix(boxes_xyxy([preds[i]]), gt_boxes[cand])[0]
        best, best_iou = -1, thr
        for j, v in zip(cand, ious):
            if not used[j] and v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
            tp[rank] = 1.0
    return tp


def evaluate_detections(preds: Sequence[BoxLabel], gts: Sequence[BoxLabel],
                        num_classes: int) -> EvalResult:
    """Score flat prediction/ground-truth lists; ``batch_index`` identifies the image."""
    classes = sorted({g.class_id for g in gts})
    if not classes:
        raise ValueError("evaluation needs at least one ground-truth box")
    per_class: dict[int, dict[float, float]] = {}
    counts = {"tp": 0, "fp": 0, "fn": 0}
    for c in classes:
        pc = [p for p in preds if p.class_id == c]
        gc = [g for g in gts if g.class_id == c]
        per_class[c] = {}
        for thr in IOU_THRESHOLDS:
            tp = match_class(pc, gc, thr)
            per_class[c][thr] = average_precision(tp, len(gc))
            if thr == 0.5:
                counts["tp"] += int(tp.sum())
                counts["fp"] += int(len(tp) - tp.sum())
                counts["fn"] += int(len(gc) - tp.sum())
    by_thr = [np.mean([per_class[c][t] for c in classes]) for t in IOU_THRESHOLDS]
    return EvalResult(per_class, float(np.mean(by_thr)), float(by_thr[0]), counts)


def predict(model, images: np.ndarray, conf_thresh: float = 0.001, nms_iou: float = 0.6,
            batch_size: int = 128, offset: int = 0) -> list[BoxLabel]:
    """Eval-mode inference over an image array; ``batch_index`` is the global image index."""
    prev = model.mode
    model.set_mode("eval")
    out: list[BoxLabel] = []
    try:
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                pred = model(T.Tensor(images[start:start + batch_size]))
                for d in decode_predictions(pred, conf_thresh, nms_iou):
                    out.append(d.with_batch(d.batch_index + start + offset))
    finally:
        model.set_mode(prev)
    return out


def evaluate(model, dataset, conf_thresh: float = 0.001, nms_iou: float = 0.6,
             batch_size: int = 128) -> EvalResult:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds: list[BoxLabel] = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        preds.extend(predict(model, dataset.images(idx), conf_thresh, nms_iou, batch_size, start))
    gts = [lb.with_batch(i) for i, lbs in enumerate(dataset.labels) for lb in lbs]
    return evaluate_detections(preds, gts, model.num_classes)
