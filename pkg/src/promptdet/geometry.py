"""Box/point algebra in normalized [0,1] image coordinates.

Boxes are stored center-format (cx, cy, w, h) everywhere; corner format
(x0, y0, x1, y1) only appears at IoU/rendering boundaries. Scalar helpers
operate on plain floats, the *_matrix variants on torch tensors so they can
sit inside loss graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import Tensor

LOGIT_EPS = 1e-5


@dataclass(frozen=True)
class NormalizedBox:
    """Axis-aligned box, center format, normalized to the unit square."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center out of [0,1]: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size out of (0,1]: ({self.w}, {self.h})")

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def area(self) -> float:
        return self.w * self.h

    def center(self) -> "NormalizedPoint":
        return NormalizedPoint(self.cx, self.cy)

    def clamped(self, min_size: float = 1e-6) -> "NormalizedBox":
        """Intersect with the unit square; keeps the result a valid box."""
        x0, y0, x1, y1 = self.corners()
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, 1.0), min(y1, 1.0)
        w = max(x1 - x0, min_size)
        h = max(y1 - y0, min_size)
        cx = min(max((x0 + x1) / 2, w / 2), 1.0 - w / 2)
        cy = min(max((y0 + y1) / 2, h / 2), 1.0 - h / 2)
        return NormalizedBox(cx, cy, w, h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class NormalizedPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"point out of [0,1]: ({self.x}, {self.y})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


def box_to_center_point(box: NormalizedBox) -> NormalizedPoint:
    return NormalizedPoint(box.cx, box.cy)


def _corner_overlap(a: NormalizedBox, b: NormalizedBox) -> tuple[float, float, float]:
    """Returns (intersection, union, hull) areas.

    All areas derive from corner extents so that identical boxes give
    intersection == union bit-exactly (center-format w*h can differ from the
    reconstructed extent by one ulp).
    """
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, hull


def iou(a: NormalizedBox, b: NormalizedBox) -> float:
    """Intersection over union in [0, 1]. Zero-area boxes never raise."""
    inter, union, _ = _corner_overlap(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: NormalizedBox, b: NormalizedBox) -> float:
    """Generalized IoU in (-1, 1], equal to iou when hull == union extent."""
    inter, union, hull = _corner_overlap(a, b)
    if union <= 0.0:
        return 0.0
    penalty = max(0.0, hull - union) / hull if hull > 0.0 else 0.0
    return inter / union - penalty


def to_logit(x, eps: float = LOGIT_EPS):
    """Inverse sigmoid; inputs clamped to [eps, 1-eps] first."""
    if isinstance(x, Tensor):
        x = x.clamp(eps, 1.0 - eps)
        return torch.log(x / (1.0 - x))
    x = min(max(float(x), eps), 1.0 - eps)
    return math.log(x / (1.0 - x))


def from_logit(x):
    if isinstance(x, Tensor):
        return torch.sigmoid(x)
    return 1.0 / (1.0 + math.exp(-float(x)))


def box_to_corners(box) -> tuple:
    """(cx,cy,w,h) -> (x0,y0,x1,y1); accepts a NormalizedBox or a 4-sequence."""
    cx, cy, w, h = box.as_tuple() if isinstance(box, NormalizedBox) else box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def box_from_corners(corners: Sequence[float]) -> tuple:
    x0, y0, x1, y1 = corners
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


# --- tensor variants (cxcywh unless noted) ---------------------------------


def boxes_to_tensor(boxes: Iterable[NormalizedBox], dtype=torch.float32) -> Tensor:
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype).reshape(-1, 4)


def tensor_to_boxes(t: Tensor) -> list[NormalizedBox]:
    return [NormalizedBox(*(float(v) for v in row)) for row in t.detach().cpu()]


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def box_xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def iou_matrix(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Pairwise IoU and union for (N,4) x (M,4) cxcywh boxes -> (N,M) each."""
    a_xy, b_xy = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    wh_a = (a_xy[:, 2:] - a_xy[:, :2]).clamp(min=0)
    wh_b = (b_xy[:, 2:] - b_xy[:, :2]).clamp(min=0)
    area_a = wh_a[:, 0] * wh_a[:, 1]
    area_b = wh_b[:, 0] * wh_b[:, 1]
    lt = torch.max(a_xy[:, None, :2], b_xy[None, :, :2])
    rb = torch.min(a_xy[:, None, 2:], b_xy[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))
    return iou, union


def giou_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise generalized IoU for (N,4) x (M,4) cxcywh boxes -> (N,M)."""
    iou, union = iou_matrix(a, b)
    a_xy, b_xy = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    lt = torch.min(a_xy[:, None, :2], b_xy[None, :, :2])
    rb = torch.max(a_xy[:, None, 2:], b_xy[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    penalty = (hull - union).clamp(min=0) / hull.clamp(min=1e-12)
    return iou - torch.where(hull > 0, penalty, torch.zeros_like(hull))
