"""Boxes, labels and detections shared by the generator, detector and metrics"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

CLASS_NAMES = ("cavity", "concave", "crack")
SHAPE_CLASS_NAMES = ("rectangle", "ellipse", "line")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in center form, pixel units"""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> BBox:
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    def clamp(self, width: float, height: float) -> BBox:
        x1, y1, x2, y2 = self.corners()
        return BBox.from_corners(
            min(max(x1, 0.0), width), min(max(y1, 0.0), height), min(max(x2, 0.0), width), min(max(y2, 0.0), height)
        )

    def inside(self, width: float, height: float, tol: float = 1e-9) -> bool:
        x1, y1, x2, y2 = self.corners()
        return self.w > 0 and self.h > 0 and x1 >= -tol and y1 >= -tol and x2 <= width + tol and y2 <= height + tol


@dataclass(frozen=True)
class GroundTruth:
    box: BBox
    class_id: int
    image_id: int = 0

    def to_record(self) -> dict[str, Any]:
        return {"class": self.class_id, "cx": self.box.cx, "cy": self.box.cy, "w": self.box.w, "h": self.box.h}

    @classmethod
    def from_record(cls, record: dict[str, Any], image_id: int = 0) -> GroundTruth:
        box = BBox(float(record["cx"]), float(record["cy"]), float(record["w"]), float(record["h"]))
        return cls(box, int(record["class"]), image_id)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float
    image_id: int = 0

    def with_image(self, image_id: int) -> Detection:
        return replace(self, image_id=image_id)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint or degenerate pairs"""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0
