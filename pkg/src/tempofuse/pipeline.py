"""Fused samples in, metrics / masks / boxes / overlays out."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .boxgen import DEFAULT_MIN_AREA, DetectionBox, boxes_from_mask, boxes_to_json, format_boxes
from .fusion import FusedSample
from .metrics import ConfusionCounts, MetricsReport, accumulate_confusion, compute_map
from .network import SegmentationNet, predict

PRED_COLOR = (0, 255, 0)
TRUTH_COLOR = (0, 0, 255)
BOX_LINE_WIDTH = 2


def sample_id(sample: FusedSample) -> str:
    return f"{sample.sequence_id}_{sample.source_indices[1]:03d}"


def evaluate(model: SegmentationNet, samples: Sequence[FusedSample], class_names: Sequence[str],
             iou_threshold: float = 0.5, min_area: int = DEFAULT_MIN_AREA) -> MetricsReport:
    n = len(class_names)
    counts = ConfusionCounts.zeros(n)
    detections: list[DetectionBox] = []
    truths: list[DetectionBox] = []
    for s in samples:
        labels, probs = predict(model, s.channels)
        labels, probs = labels.numpy(), probs.numpy()
        counts = accumulate_confusion(labels, s.target, n, counts)
        sid = sample_id(s)
        detections += boxes_from_mask(labels, probs, min_area, sid)
        truths += boxes_from_mask(s.target, None, 1, sid)
    ap_by_class, _ = compute_map(detections, truths, iou_threshold) if truths else ({}, 0.0)
    return MetricsReport.from_counts(counts, ap_by_class, class_names)


def draw_box(rgb: np.ndarray, box: DetectionBox, color, width: int = BOX_LINE_WIDTH) -> None:
    h, w = rgb.shape[:2]
    r0, r1 = box.row_min, box.row_max
    c0, c1 = box.col_min, box.col_max
    rgb[r0:min(r0 + width, r1 + 1), c0:c1 + 1] = color
    rgb[max(r1 - width + 1, r0):r1 + 1, c0:c1 + 1] = color
    rgb[r0:r1 + 1, c0:min(c0 + width, c1 + 1)] = color
    rgb[r0:r1 + 1, max(c1 - width + 1, c0):c1 + 1] = color


def render_overlay(image: np.ndarray, predicted: Sequence[DetectionBox],
                   truth: Sequence[DetectionBox] = ()) -> np.ndarray:
    """Grayscale scan as RGB with truth boxes in blue, then predictions in green on top."""
    gray = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for b in truth:
        draw_box(rgb, b, TRUTH_COLOR)
    for b in predicted:
        draw_box(rgb, b, PRED_COLOR)
    return rgb


def infer_samples(model: SegmentationNet, samples: Sequence[FusedSample], class_names: Sequence[str],
                  out_dir, with_truth: bool = False, min_area: int = DEFAULT_MIN_AREA) -> list[Path]:
    """Write label map, box files and overlay per fused sample; returns overlay paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overlays = []
    for s in samples:
        sid = sample_id(s)
        labels, probs = predict(model, s.channels)
        labels = labels.numpy()
        boxes = boxes_from_mask(labels, probs.numpy(), min_area, sid)
        truth = boxes_from_mask(s.target, None, 1, sid) if with_truth else []
        Image.fromarray(labels.astype(np.uint8), mode="L").save(out_dir / f"{sid}_pred.png")
        (out_dir / f"{sid}_boxes.txt").write_text(format_boxes(boxes, class_names), encoding="utf-8")
        (out_dir / f"{sid}_boxes.json").write_text(boxes_to_json(boxes, class_names), encoding="utf-8")
        path = out_dir / f"{sid}_overlay.png"
        Image.fromarray(render_overlay(s.channels[1], boxes, truth), mode="RGB").save(path)
        overlays.append(path)
    return overlays
