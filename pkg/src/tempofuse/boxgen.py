"""Mask to bounding box conversion via 8-connected components."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

DEFAULT_MIN_AREA = 9
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Component:
    class_id: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def pixel_count(self) -> int:
        return int(self.rows.size)


@dataclass(frozen=True)
class DetectionBox:
    """Axis-aligned box with inclusive pixel extents."""
    class_id: int
    row_min: int
    row_max: int
    col_min: int
    col_max: int
    confidence: float = 1.0
    pixel_count: int = 0
    image_id: str = ""

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate box extents {self}")

    @property
    def area(self) -> int:
        return (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)


def extract_instances(mask: np.ndarray, min_area: int = DEFAULT_MIN_AREA) -> list[Component]:
    """Connected components of every suspicious class (label >= 1).

    Components are ordered by class id, then by first pixel in raster order.
    """
    mask = np.asarray(mask)
    out = []
    for class_id in np.unique(mask):
        if class_id == 0:
            continue
        labels, count = ndimage.label(mask == class_id, structure=_EIGHT_CONNECTED)
        for lab in range(1, count + 1):
            rows, cols = np.nonzero(labels == lab)
            if rows.size >= min_area:
                out.append(Component(int(class_id), rows, cols))
    return out


def boxes_from_components(components: Sequence[Component], probability_map=None,
                          image_id: str = "") -> list[DetectionBox]:
    """One box per component from its extreme rows and columns.

    ``probability_map`` is (n, N1, N2) softmax output; confidence is the mean
    probability of the component's class over its pixels (1.0 without a map).
    """
    boxes = []
    for comp in components:
        if probability_map is None:
            confidence = 1.0
        else:
            confidence = float(np.asarray(probability_map)[comp.class_id, comp.rows, comp.cols].mean())
        boxes.append(DetectionBox(
            class_id=comp.class_id,
            row_min=int(comp.rows.min()), row_max=int(comp.rows.max()),
            col_min=int(comp.cols.min()), col_max=int(comp.cols.max()),
            confidence=confidence, pixel_count=comp.pixel_count, image_id=image_id))
    return boxes


def boxes_from_mask(mask, probability_map=None, min_area: int = DEFAULT_MIN_AREA,
                    image_id: str = "") -> list[DetectionBox]:
    return boxes_from_components(extract_instances(mask, min_area), probability_map, image_id)


def box_iou(a: DetectionBox, b: DetectionBox) -> float:
    ih = min(a.row_max, b.row_max) - max(a.row_min, b.row_min) + 1
    iw = min(a.col_max, b.col_max) - max(a.col_min, b.col_min) + 1
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    return inter / (a.area + b.area - inter)


def format_boxes(boxes: Sequence[DetectionBox], class_names: Sequence[str]) -> str:
    """``image_id class_name confidence row_min col_min row_max col_max`` per line."""
    return "".join(
        f"{b.image_id} {class_names[b.class_id]} {b.confidence:.6f} "
        f"{b.row_min} {b.col_min} {b.row_max} {b.col_max}\n" for b in boxes)


def boxes_to_json(boxes: Sequence[DetectionBox], class_names: Sequence[str]) -> str:
    return json.dumps([dict(asdict(b), class_name=class_names[b.class_id]) for b in boxes],
                      indent=2)
