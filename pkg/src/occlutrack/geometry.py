"""Box arithmetic, distractor selection and the occlusion-gated weight."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Optional


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels: ``(left, top, width, height)``."""

    left: float
    top: float
    width: float
    height: float

    def __post_init__(self):
        vals = (self.left, self.top, self.width, self.height)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"box needs positive size, got {self.width}x{self.height}")

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.left + dx, self.top + dy, self.width, self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.width, self.height)


@dataclass(frozen=True)
class OcclusionConfig:
    o_min: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.o_min < 1.0:
            raise ValueError(f"o_min must lie in [0, 1), got {self.o_min}")


def intersection(a: BBox, b: BBox) -> float:
    # open-interval overlap: touching edges contribute nothing
    w = min(a.right, b.right) - max(a.left, b.left)
    h = min(a.bottom, b.bottom) - max(a.top, b.top)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    # right = left + width can round, so identical boxes may overshoot 1 by an ulp
    return min(inter / (a.area + b.area - inter), 1.0)


def weight_from_iou(overlap: float, o_min: float) -> float:
    return max(overlap - o_min, 0.0) / (1.0 - o_min)


def adaptive_weight(target_box: BBox, distractor_box: BBox, cfg: OcclusionConfig = OcclusionConfig()) -> float:
    """Attention weight: zero up to ``o_min`` overlap, rising linearly to 1 at IoU 1."""
    return weight_from_iou(iou(target_box, distractor_box), cfg.o_min)


def select_distractor(target_id: Hashable, tracked_boxes: Mapping[Hashable, BBox]) -> Optional[Hashable]:
    """Other tracked id with the largest IoU against the target; smallest id on ties."""
    target = tracked_boxes[target_id]
    best_id, best = None, 0.0
    for other_id in sorted(k for k in tracked_boxes if k != target_id):
        overlap = iou(target, tracked_boxes[other_id])
        if overlap > best:
            best_id, best = other_id, overlap
    return best_id
