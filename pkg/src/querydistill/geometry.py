"""Normalized box geometry: format conversion and IoU / GIoU / L1 primitives.

All boxes are center-format ``(cx, cy, w, h)`` expressed as fractions of the
image extent, so the whole pipeline is resolution free.  The scalar helpers
operate on :class:`Box` values and plain floats; the ``pairwise_*`` /
``paired_*`` functions are the tensor equivalents used on the training path
(last dimension 4, center format) and are differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

SIZE_EPS = 1e-6


@dataclass(frozen=True)
class Box:
    """A normalized center-format box. Sizes are clamped to ``SIZE_EPS`` at
    construction so downstream area ratios never divide by zero."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError(f"non-finite box coordinates: {self}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside [0,1]: {self}")
        object.__setattr__(self, "w", min(max(float(self.w), SIZE_EPS), 1.0))
        object.__setattr__(self, "h", min(max(float(self.h), SIZE_EPS), 1.0))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))

    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def to_corners(b: Box) -> tuple[float, float, float, float]:
    """Convert to ``(x1, y1, x2, y2)`` corner format."""
    return (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def from_corners(x1: float, y1: float, x2: float, y2: float) -> Box:
    """Inverse of :func:`to_corners`."""
    return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def _inter_union_scalar(a: Box, b: Box) -> tuple[float, float]:
    # areas derive from the same corner coordinates as the intersection, so
    # identical boxes give inter == union exactly
    ax1, ay1, ax2, ay2 = to_corners(a)
    bx1, by1, bx2, by2 = to_corners(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter, area_a + area_b - inter


def intersection_area(a: Box, b: Box) -> float:
    return _inter_union_scalar(a, b)[0]


def iou(a: Box, b: Box) -> float:
    """Intersection over union, in [0, 1]."""
    inter, union = _inter_union_scalar(a, b)
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: ``iou - (hull - union) / hull``, in (-1, 1]."""
    inter, union = _inter_union_scalar(a, b)
    ax1, ay1, ax2, ay2 = to_corners(a)
    bx1, by1, bx2, by2 = to_corners(b)
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (hull - union) / hull


def l1_distance(a: Box, b: Box) -> float:
    """Sum of absolute differences over the four center-format coordinates."""
    return (
        abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)
    )


# --- tensor path ---------------------------------------------------------
#
# Callers are expected to keep w, h >= SIZE_EPS (the network clamps its box
# outputs, GT tensors come from Box values), so no epsilon is folded into the
# area ratios and identities like giou(b, b) == 1 hold exactly.


def boxes_to_tensor(boxes, dtype=torch.float64) -> torch.Tensor:
    """Stack Box values (or anything with ``as_tuple``) into an [N, 4] tensor."""
    if len(boxes) == 0:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)


def corners(boxes: torch.Tensor) -> torch.Tensor:
    """Center format [..., 4] to corner format [..., 4]."""
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1
    )


def _inter_union(c1: torch.Tensor, c2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    area1 = (c1[..., 2] - c1[..., 0]) * (c1[..., 3] - c1[..., 1])
    area2 = (c2[..., 2] - c2[..., 0]) * (c2[..., 3] - c2[..., 1])
    lt = torch.maximum(c1[..., :2], c2[..., :2])
    rb = torch.minimum(c1[..., 2:], c2[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    return inter, area1 + area2 - inter


def paired_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of two aligned box tensors [..., 4] -> [...]."""
    inter, union = _inter_union(corners(a), corners(b))
    return inter / union


def paired_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of two aligned box tensors [..., 4] -> [...]."""
    c1, c2 = corners(a), corners(b)
    inter, union = _inter_union(c1, c2)
    lt = torch.minimum(c1[..., :2], c2[..., :2])
    rb = torch.maximum(c1[..., 2:], c2[..., 2:])
    hull = (rb - lt).prod(-1)
    return inter / union - (hull - union) / hull


def paired_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise L1 distance of two aligned box tensors [..., 4] -> [...]."""
    return (a - b).abs().sum(-1)


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs IoU: [..., N, 4] x [..., M, 4] -> [..., N, M]."""
    return paired_iou(a.unsqueeze(-2), b.unsqueeze(-3))


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs GIoU: [..., N, 4] x [..., M, 4] -> [..., N, M]."""
    return paired_giou(a.unsqueeze(-2), b.unsqueeze(-3))


def pairwise_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs L1 distance: [..., N, 4] x [..., M, 4] -> [..., N, M]."""
    return paired_l1(a.unsqueeze(-2), b.unsqueeze(-3))
