"""Pixel confusion accounting, segmentation scores and box-level AP/mAP."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxgen import DetectionBox, box_iou


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest pixel counts per class."""
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ConfusionCounts":
        z = np.zeros(n, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise MetricsError("cannot merge counts over different class counts")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def accumulate_confusion(pred_mask, true_mask, n: int,
                         counts: ConfusionCounts | None = None) -> ConfusionCounts:
    """Counts for one image pair, added onto ``counts`` when given."""
    pred = np.asarray(pred_mask, dtype=np.int64)
    true = np.asarray(true_mask, dtype=np.int64)
    if pred.shape != true.shape:
        raise MetricsError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    for name, m in (("predicted", pred), ("true", true)):
        if m.size and (m.min() < 0 or m.max() >= n):
            raise MetricsError(f"{name} mask has values outside [0, {n - 1}]")
    cm = np.bincount((true * n + pred).ravel(), minlength=n * n).reshape(n, n)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    result = ConfusionCounts(tp, fp, fn, tn)
    return result if counts is None else counts + result


def compute_iou(counts: ConfusionCounts, class_id: int) -> float:
    """TP / (TP + FP + FN); NaN when the class is absent from prediction and truth."""
    denom = counts.tp[class_id] + counts.fp[class_id] + counts.fn[class_id]
    if denom == 0:
        return math.nan
    return float(counts.tp[class_id] / denom)


def _present_suspicious(counts: ConfusionCounts) -> list[int]:
    present = [c for c in range(1, counts.num_classes) if counts.tp[c] + counts.fn[c] > 0]
    if not present:
        raise MetricsError("no suspicious class is present in the ground truth")
    return present


def compute_miou(counts: ConfusionCounts) -> float:
    """Unweighted mean IoU over suspicious classes, skipping degenerate ones."""
    _present_suspicious(counts)
    ious = [compute_iou(counts, c) for c in range(1, counts.num_classes)]
    return float(np.mean([v for v in ious if not math.isnan(v)]))


@dataclass(frozen=True)
class PRF:
    recall: float
    precision: float
    f_score: float
    accuracy: float
    degenerate: tuple[str, ...] = ()


def compute_prf(counts: ConfusionCounts) -> PRF:
    """Micro-averaged recall, precision, F1 over suspicious classes plus pixel accuracy.

    Zero denominators yield 0 and are listed in ``degenerate``.
    """
    _present_suspicious(counts)
    tp = int(counts.tp[1:].sum())
    fp = int(counts.fp[1:].sum())
    fn = int(counts.fn[1:].sum())
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    recall = ratio(tp, tp + fn, "recall")
    precision = ratio(tp, tp + fp, "precision")
    f_score = ratio(2 * recall * precision, recall + precision, "f_score")
    # every correctly labelled pixel, background included
    accuracy = ratio(int(counts.tp.sum()), counts.total, "accuracy")
    return PRF(recall, precision, f_score, accuracy, tuple(flags))


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under a precision-recall curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def class_average_precision(detections: Sequence[DetectionBox],
                            ground_truth: Sequence[DetectionBox],
                            iou_threshold: float = 0.5) -> float:
    """AP for a single class; boxes only match within the same ``image_id``."""
    if not ground_truth:
        raise MetricsError("AP is undefined without ground-truth boxes")
    gt_by_image = defaultdict(list)
    for g in ground_truth:
        gt_by_image[g.image_id].append(g)
    used = {img: [False] * len(gts) for img, gts in gt_by_image.items()}

    conf = np.array([d.confidence for d in detections], dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    hits = np.zeros(len(detections))
    for rank, i in enumerate(order):
        det = detections[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_by_image.get(det.image_id, ())):
            if used[det.image_id][j]:
                continue
            iou = box_iou(det, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_threshold:
            used[det.image_id][best_j] = True
            hits[rank] = 1.0

    tp = np.cumsum(hits)
    recall = tp / len(ground_truth)
    precision = tp / np.arange(1, len(detections) + 1)
    return average_precision(recall, precision)


def mean_average_precision(aps: Sequence[float]) -> float:
    """Mean of per-class APs (a plain sum would exceed 1 for several classes)."""
    if not len(aps):
        raise MetricsError("no per-class AP values to average")
    return float(np.mean(aps))


def compute_map(detections: Sequence[DetectionBox], ground_truth: Sequence[DetectionBox],
                iou_threshold: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class AP for every class with ground truth, and their mean."""
    if not 0.0 < iou_threshold < 1.0:
        raise MetricsError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    for d in detections:
        if not 0.0 <= d.confidence <= 1.0:
            raise MetricsError(f"detection confidence {d.confidence} outside [0, 1]")
    classes = sorted({g.class_id for g in ground_truth})
    per_class = {
        c: class_average_precision([d for d in detections if d.class_id == c],
                                   [g for g in ground_truth if g.class_id == c],
                                   iou_threshold)
        for c in classes
    }
    return per_class, mean_average_precision(list(per_class.values()))


@dataclass
class MetricsReport:
    class_names: tuple[str, ...]
    per_class_iou: list[float | None]
    miou: float
    recall: float
    precision: float
    f_score: float
    accuracy: float
    per_class_ap: list[float | None]
    map: float
    degenerate: list[str] = field(default_factory=list)

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, ap_by_class: dict[int, float],
                    class_names: Sequence[str]) -> "MetricsReport":
        prf = compute_prf(counts)
        ious = [compute_iou(counts, c) for c in range(1, counts.num_classes)]
        flags = list(prf.degenerate)
        flags += [f"iou_{class_names[c]}" for c, v in enumerate(ious, start=1) if math.isnan(v)]
        aps = [ap_by_class.get(c) for c in range(1, counts.num_classes)]
        flags += [f"ap_{class_names[c]}" for c, v in enumerate(aps, start=1) if v is None]
        if ap_by_class:
            mean_ap = mean_average_precision(list(ap_by_class.values()))
        else:
            mean_ap = 0.0
            flags.append("map")
        return cls(
            class_names=tuple(class_names),
            per_class_iou=[None if math.isnan(v) else v for v in ious],
            miou=compute_miou(counts),
            recall=prf.recall, precision=prf.precision, f_score=prf.f_score,
            accuracy=prf.accuracy, per_class_ap=aps, map=mean_ap, degenerate=flags)

    def as_dict(self) -> dict:
        d = {
            "miou": self.miou,
            "recall": self.recall,
            "precision": self.precision,
            "f_score": self.f_score,
            "accuracy": self.accuracy,
            "map": self.map,
        }
        for name, v in zip(self.class_names[1:], self.per_class_iou):
            d[f"iou_{name}"] = v
        for name, v in zip(self.class_names[1:], self.per_class_ap):
            d[f"ap_{name}"] = v
        d["degenerate"] = list(self.degenerate)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            if isinstance(v, list):
                v = ",".join(v) if v else "-"
            elif v is None:
                v = "n/a"
            else:
                v = f"{v:.6f}"
            lines.append(f"{k}: {v}")
        return "\n".join(lines) + "\n"
