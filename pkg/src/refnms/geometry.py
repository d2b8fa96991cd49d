"""Axis-aligned bounding-box arithmetic: IoU, hit tests, best-overlap lookup."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: (x1, y1) top-left corner, (x2, y2) bottom-right corner.

    Coordinates are continuous; zero-width or zero-height boxes are legal
    (area 0), inverted corners are not.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(
                f"inverted box corners: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes, in [0, 1].

    Returns 0.0 when the boxes are disjoint or the union has zero area
    (degenerate boxes).
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def hits(candidate: Box, target: Box, threshold: float = 0.5) -> bool:
    """True when the candidate overlaps the target strictly above `threshold` IoU."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"hit threshold must lie in (0, 1), got {threshold}")
    return iou(candidate, target) > threshold


def max_iou_against(candidate: Box, targets: Iterable[Box]) -> float:
    """Largest IoU between `candidate` and any box in `targets`; 0.0 when empty."""
    best = 0.0
    for t in targets:
        v = iou(candidate, t)
        if v > best:
            best = v
    return best
