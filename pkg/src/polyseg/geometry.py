"""Axis-aligned bounding boxes and the box arithmetic shared by every stage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class BoundingBox:
    """Corner-form box in image coordinates (origin top-left, x = column)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.width, self.height)

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(x, y, x + w, y + h)

    def clip(self, height: int, width: int) -> "BoundingBox":
        """Clip to image bounds; raises if nothing survives."""
        return BoundingBox(
            max(0.0, min(self.x_min, width - 1.0)),
            max(0.0, min(self.y_min, height - 1.0)),
            min(float(width), max(self.x_max, 1.0)),
            min(float(height), max(self.y_max, 1.0)),
        )

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union with continuous areas; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def boxes_from_mask(mask: np.ndarray) -> list[BoundingBox]:
    """Tight boxes around each 8-connected component of a binary mask.

    Corner convention: a component spanning rows r0..r1 and cols c0..c1
    (inclusive) yields the box (c0, r0, c1+1, r1+1), so box edges sit on
    pixel boundaries. Boxes are ordered by (y_min, x_min).
    """
    labelled, n = ndimage.label(mask > 0, structure=np.ones((3, 3), dtype=int))
    boxes = []
    for sl in ndimage.find_objects(labelled):
        if sl is None:
            continue
        rs, cs = sl
        boxes.append(BoundingBox(float(cs.start), float(rs.start), float(cs.stop), float(rs.stop)))
    boxes.sort(key=lambda b: (b.y_min, b.x_min))
    return boxes
