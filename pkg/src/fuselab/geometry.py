"""Axis-aligned box arithmetic: area, IoU and greedy NMS.

Boxes use continuous corner coordinates with the origin at the top-left
corner of the image, x growing rightward and y downward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

from .errors import ConfigError, ValidationError


@dataclass(frozen=True, order=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {coords}: need x_min < x_max and y_min < y_max")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise ValidationError(f"bbox needs 4 numbers, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def within(self, width: float, height: float) -> bool:
        """True if the box lies inside a ``width`` x ``height`` image."""
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


def area(b: BoundingBox) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def intersection(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    if a == b:
        return 1.0
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    # Symmetric in (a, b): the sum of areas commutes exactly.
    union = area(a) + area(b) - inter
    return min(1.0, inter / union)


def nms(
    boxes: Sequence[tuple[BoundingBox, float, Any]],
    iou_threshold: float,
    class_aware: bool = True,
) -> list[tuple[BoundingBox, float, Any]]:
    """Greedy non-maximum suppression.

    Args:
        boxes: ``(box, score, cls)`` triples. Extra trailing payload items are
            allowed and returned untouched.
        iou_threshold: a candidate is dropped when its IoU with an already kept
            box is at least this value.
        class_aware: only boxes of the same class suppress each other.

    Returns:
        The kept triples, in the order they were selected (descending score;
        ties by smaller ``x_min``, then ``y_min``, then input index).
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ConfigError(f"nms iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(
        range(len(boxes)),
        key=lambda i: (-boxes[i][1], boxes[i][0].x_min, boxes[i][0].y_min, i),
    )
    kept: list[int] = []
    for i in order:
        box_i, _, cls_i = boxes[i][:3]
        suppressed = False
        for j in kept:
            box_j, _, cls_j = boxes[j][:3]
            if class_aware and cls_i != cls_j:
                continue
            if iou(box_i, box_j) >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return [boxes[i] for i in kept]
