"""Boxes, detections and labeled samples.

Boxes are corner-coded ``(x1, y1, x2, y2)`` in continuous pixel coordinates
with the origin at the top-left. Class id 0 is background everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box must have positive area, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [float(self.x1), float(self.y1), float(self.x2), float(self.y2)]

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("class id 0 is background and cannot be emitted")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class LabeledSample:
    """An image of shape (3, H, W) in [0, 1] with its box annotations.

    ``weight`` is the per-sample gate used during self-training: 1 when the
    sample carries at least one (pseudo-)label, 0 otherwise.
    """

    image: np.ndarray
    boxes: tuple[BoundingBox, ...] = ()
    classes: tuple[int, ...] = ()
    weight: float = 1.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes differ in length")
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {self.image.shape}")

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    @property
    def width(self) -> int:
        return int(self.image.shape[2])

    def box_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([b.as_list() for b in self.boxes], dtype=np.float64)

    def with_image(self, image: np.ndarray) -> "LabeledSample":
        return replace(self, image=image)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) corner-coded arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def flip_box(b: BoundingBox, width: float) -> BoundingBox:
    return BoundingBox(width - b.x2, b.y1, width - b.x1, b.y2)


def flip_horizontal(sample: LabeledSample) -> LabeledSample:
    w = sample.width
    image = np.ascontiguousarray(sample.image[:, :, ::-1])
    boxes = tuple(flip_box(b, w) for b in sample.boxes)
    return replace(sample, image=image, boxes=boxes)


def clip_box(b: BoundingBox, height: int, width: int) -> Optional[BoundingBox]:
    if height <= 0 or width <= 0:
        raise ValueError("image size must be positive")
    x1 = min(max(b.x1, 0.0), width)
    x2 = min(max(b.x2, 0.0), width)
    y1 = min(max(b.y1, 0.0), height)
    y2 = min(max(b.y2, 0.0), height)
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox(x1, y1, x2, y2)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression; the result is sorted by descending score."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept
