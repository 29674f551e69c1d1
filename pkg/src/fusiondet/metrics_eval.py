"""Detection metrics: IoU, greedy NMS, TP/FP matching, AP, mAP@50, mAP@50-95.

AP uses all-point interpolation: precision is replaced by its monotone
envelope (max precision at any recall >= r) and integrated over recall.
Precision/recall points are taken only after each block of tied scores, so
AP depends on the ranking alone and not on the order of tied detections.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SCORE_THRESHOLD = 0.5


@dataclass
class DetBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        if not (self.x2 >= self.x1 and self.y2 >= self.y1):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def iou(a: DetBox, b: DetBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _rank(scores: Sequence[float]) -> List[int]:
    # descending score, ties by original index
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def nms(boxes: Sequence[DetBox], iou_thresh: float) -> List[DetBox]:
    """Greedy NMS for boxes of one class; returns kept boxes best-first."""
    kept: List[DetBox] = []
    for i in _rank([b.score for b in boxes]):
        cand = boxes[i]
        if all(iou(cand, k) <= iou_thresh for k in kept):
            kept.append(cand)
    return kept


def batched_nms(boxes: Sequence[DetBox], iou_thresh: float) -> List[DetBox]:
    """Run :func:`nms` independently per class."""
    by_class: Dict[int, List[DetBox]] = defaultdict(list)
    for b in boxes:
        by_class[b.class_id].append(b)
    out: List[DetBox] = []
    for cls in sorted(by_class):
        out.extend(nms(by_class[cls], iou_thresh))
    return out


def match_detections(dets: Sequence[DetBox], gts: Sequence[DetBox], iou_thresh: float) -> List[bool]:
    """TP flag for each detection (input order) of one class in one image."""
    labels = [False] * len(dets)
    matched = [False] * len(gts)
    for i in _rank([d.score for d in dets]):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            o = iou(dets[i], g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            matched[best_j] = True
            labels[i] = True
    return labels


def average_precision(labels: Sequence[bool], scores: Sequence[float], gt_count: int) -> Optional[float]:
    """Area under the interpolated precision-recall curve.

    With no ground truth the value is 0.0 if anything was detected and
    ``None`` (not applicable) otherwise.
    """
    if gt_count == 0:
        return 0.0 if len(labels) else None
    if not len(labels):
        return 0.0
    scores = np.asarray(scores, dtype=np.float64)
    order = np.array(_rank(list(scores)), dtype=np.int64)
    tp = np.asarray(labels, dtype=np.float64)[order]
    s = scores[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    # keep the last position of every block of equal scores
    last = np.append(s[1:] != s[:-1], True)
    recall = ctp[last] / gt_count
    precision = ctp[last] / (ctp[last] + cfp[last])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(steps * envelope))


@dataclass
class EvalReport:
    classes: List[int]
    ap: Dict[int, List[Optional[float]]]  # per class, one entry per IoU threshold
    map50: float
    map50_95: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS
    score_threshold: float = SCORE_THRESHOLD

    def as_dict(self) -> Dict[str, float]:
        out = {
            "mAP50": self.map50,
            "mAP50_95": self.map50_95,
            "recall": self.recall,
            "precision": self.precision,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }
        for cls in self.classes:
            aps = self.ap[cls]
            out[f"AP50.class{cls}"] = "na" if aps[0] is None else aps[0]
            out[f"AP50_95.class{cls}"] = "na" if aps[0] is None else float(np.mean(aps))
        return out

    def to_text(self) -> str:
        lines = [
            "# detection evaluation",
            f"# precision/recall measured at score >= {self.score_threshold} and IoU {self.iou_thresholds[0]}",
            f"# mAP50-95 averages IoU thresholds {self.iou_thresholds[0]}:0.05:{self.iou_thresholds[-1]}",
            "# classes without ground truth are excluded from the means (na)",
            f"{'mAP@50':>10} {'mAP@50-95':>10} {'Recall':>10} {'Precision':>10}",
            f"{self.map50:>10.4f} {self.map50_95:>10.4f} {self.recall:>10.4f} {self.precision:>10.4f}",
        ]
        for k, v in self.as_dict().items():
            lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"


def evaluate(dets: Mapping[str, Sequence[DetBox]], gts: Mapping[str, Sequence[DetBox]],
             classes: Optional[Iterable[int]] = None,
             iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
             score_threshold: float = SCORE_THRESHOLD) -> EvalReport:
    """Dataset-level metrics from per-image detections and ground truth."""
    images = sorted(set(dets) | set(gts))
    if classes is None:
        classes = {b.class_id for img in images for b in list(dets.get(img, ())) + list(gts.get(img, ()))}
    classes = sorted(set(classes))
    if not classes:
        raise ValueError("evaluate needs at least one class")
    known = set(classes)
    for img in images:
        for b in list(dets.get(img, ())) + list(gts.get(img, ())):
            if b.class_id not in known:
                raise ValueError(f"image {img!r}: class id {b.class_id} not in {classes}")

    def split(src, img):
        out = defaultdict(list)
        for b in src.get(img, ()):
            out[b.class_id].append(b)
        return out

    per_image = [(split(dets, img), split(gts, img)) for img in images]
    ap: Dict[int, List[Optional[float]]] = {}
    for cls in classes:
        gt_count = sum(len(g[cls]) for _, g in per_image)
        row = []
        for t in iou_thresholds:
            labels, scores = [], []
            for d, g in per_image:
                labels += match_detections(d[cls], g[cls], t)
                scores += [b.score for b in d[cls]]
            row.append(average_precision(labels, scores, gt_count) if gt_count else None)
        ap[cls] = row

    scored = [c for c in classes if ap[c][0] is not None]
    map50 = float(np.mean([ap[c][0] for c in scored])) if scored else 0.0
    map50_95 = float(np.mean([np.mean(ap[c]) for c in scored])) if scored else 0.0

    tp = fp = n_gt = 0
    for d, g in per_image:
        for cls in classes:
            confident = [b for b in d[cls] if b.score >= score_threshold]
            labels = match_detections(confident, g[cls], iou_thresholds[0])
            tp += sum(labels)
            fp += len(labels) - sum(labels)
            n_gt += len(g[cls])
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return EvalReport(classes, ap, map50, map50_95, precision, recall, tp, fp, n_gt - tp,
                      tuple(iou_thresholds), score_threshold)
