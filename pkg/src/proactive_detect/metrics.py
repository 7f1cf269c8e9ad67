"""Detection and segmentation metrics.

Average precision uses greedy score-ordered matching per class and the
all-point interpolated precision envelope (COCO convention, not 11-point).
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"invalid box ordering: {self}")

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    box: BBox | None  # None marks a degenerate (zero-area) prediction
    class_id: int
    score: float
    image_id: int = 0


@dataclass(frozen=True)
class GroundTruth:
    box: BBox
    class_id: int
    image_id: int = 0


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    score_threshold: float


def iou(a, b):
    """Intersection over union of two boxes; None (degenerate) scores 0."""
    if a is None or b is None:
        return 0.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _match_class(dets, gts, iou_threshold):
    """Greedy matching; returns TP flags in score order and the sorted scores."""
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)  # stable on ties
    by_image = defaultdict(list)
    for g in gts:
        by_image[g.image_id].append(g)
    used = {img: [False] * len(lst) for img, lst in by_image.items()}
    tp = []
    for k in order:
        d = dets[k]
        cands = by_image.get(d.image_id, [])
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(cands):
            if used[d.image_id][j]:
                continue
            v = iou(d.box, g.box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[d.image_id][best] = True
            tp.append(True)
        else:
            tp.append(False)
    return tp, [dets[k].score for k in order]


def pr_curve(detections, ground_truths, iou_threshold):
    """Precision/recall after each detection, in descending score order."""
    tp, scores = _match_class(list(detections), list(ground_truths), iou_threshold)
    n_gt = len(ground_truths)
    points, hits = [], 0
    for k, (flag, s) in enumerate(zip(tp, scores), start=1):
        hits += flag
        points.append(PRPoint(hits / n_gt if n_gt else 0.0, hits / k, s))
    return points


def _ap_from_curve(points):
    if not points:
        return 0.0
    recall = np.array([0.0] + [p.recall for p in points])
    precision = np.array([p.precision for p in points])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * envelope))


def average_precision(detections, ground_truths, iou_threshold=0.5):
    """Class-averaged AP at one IoU threshold.

    Classes with neither ground truths nor detections are skipped; a class
    with detections but no ground truths scores 0.  Returns 0.0 when every
    class is skipped.
    """
    det_by_cls, gt_by_cls = defaultdict(list), defaultdict(list)
    for d in detections:
        det_by_cls[d.class_id].append(d)
    for g in ground_truths:
        gt_by_cls[g.class_id].append(g)
    per_class = []
    for c in sorted(set(det_by_cls) | set(gt_by_cls)):
        if not gt_by_cls[c]:
            per_class.append(0.0)
            continue
        per_class.append(_ap_from_curve(pr_curve(det_by_cls[c], gt_by_cls[c], iou_threshold)))
    return float(np.mean(per_class)) if per_class else 0.0


def mean_ap(detections, ground_truths):
    """AP averaged over IoU 0.50:0.05:0.95 plus AP50 and AP75."""
    detections, ground_truths = list(detections), list(ground_truths)
    per_t = {t: average_precision(detections, ground_truths, t) for t in IOU_THRESHOLDS}
    return {"AP": float(np.mean(list(per_t.values()))), "AP50": per_t[0.5], "AP75": per_t[0.75]}


def mae(pred, gt):
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"mae: shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def f_beta(pred, gt, beta_squared=0.3):
    """F-measure with the adaptive threshold min(1, 2 * mean(pred))."""
    pred, gt = np.asarray(pred, float), np.asarray(gt) > 0.5
    if pred.shape != gt.shape:
        raise ValueError(f"f_beta: shape mismatch {pred.shape} vs {gt.shape}")
    if not gt.any():
        raise ValueError("f_beta: ground-truth map has no positive pixels")
    thr = min(1.0, 2.0 * float(pred.mean()))
    binary = pred >= thr if thr > 0 else pred > 0
    tp = float(np.sum(binary & gt))
    if tp == 0:
        return 0.0
    precision = tp / float(binary.sum())
    recall = tp / float(gt.sum())
    return (1 + beta_squared) * precision * recall / (beta_squared * precision + recall)
