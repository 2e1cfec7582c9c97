"""Bounding-box value types, coordinate conversions, IoU and generalized IoU.

All internal box math uses normalized center form (cx, cy, w, h); corner
form (x1, y1, x2, y2) appears only at I/O boundaries. Tensor variants are
differentiable and are the ones used inside losses; the scalar wrappers
operate on `Box` values and are convenient for data handling and tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

CORNER_ROUNDTRIP_TOL = 1e-9


@dataclass(frozen=True)
class Box:
    """Normalized center-format box: center (cx, cy), size (w, h), all in [0, 1]."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"Box.{name}={v} outside [0, 1]")

    def to_corner(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def to_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor([self.cx, self.cy, self.w, self.h], dtype=dtype)

    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class PixelBox:
    """Integer-pixel corner box, x1 < x2 and y1 < y2, within image bounds."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"PixelBox corners not ordered: {self}")
        if self.x1 < 0 or self.y1 < 0:
            raise ValueError(f"PixelBox has negative coordinates: {self}")

    def to_box(self, image_w: int, image_h: int) -> Box:
        """Normalize to center form relative to an image of size (w, h)."""
        if self.x2 > image_w or self.y2 > image_h:
            raise ValueError(f"{self} exceeds image bounds {image_w}x{image_h}")
        return from_corner(
            self.x1 / image_w, self.y1 / image_h, self.x2 / image_w, self.y2 / image_h
        )


def from_corner(x1: float, y1: float, x2: float, y2: float) -> Box:
    """Build a Box from corner coordinates; rejects inverted corners."""
    if x1 > x2 or y1 > y2:
        raise ValueError(f"inverted corners ({x1}, {y1}, {x2}, {y2})")
    return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def to_corner(b: Box) -> tuple[float, float, float, float]:
    return b.to_corner()


def center_to_corner(boxes: torch.Tensor) -> torch.Tensor:
    """(..., 4) center-form tensor -> corner form. Differentiable."""
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1
    )


def corner_to_center(boxes: torch.Tensor) -> torch.Tensor:
    """(..., 4) corner-form tensor -> center form. Differentiable."""
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def _inter_union(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Elementwise intersection and union areas of center-form boxes."""
    ca, cb = center_to_corner(a), center_to_corner(b)
    lt = torch.maximum(ca[..., :2], cb[..., :2])
    rb = torch.minimum(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = a[..., 2] * a[..., 3]
    area_b = b[..., 2] * b[..., 3]
    return inter, area_a + area_b - inter


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of center-form boxes; 0 where the union is empty."""
    inter, union = _inter_union(a, b)
    return torch.where(union > 0, inter / torch.where(union > 0, union, union + 1), torch.zeros_like(union))


def box_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise generalized IoU of center-form boxes. Differentiable.

    Degenerate pairs whose enclosing box has zero area yield 0 (and a
    warning); everything else follows iou - (enclosing - union) / enclosing.
    """
    inter, union = _inter_union(a, b)
    ca, cb = center_to_corner(a), center_to_corner(b)
    lt = torch.minimum(ca[..., :2], cb[..., :2])
    rb = torch.maximum(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    enclosing = wh[..., 0] * wh[..., 1]
    degenerate = enclosing <= 0
    if bool(degenerate.any()):
        warnings.warn("zero-area enclosing box in GIoU; returning 0 for those pairs")
    safe_union = torch.where(union > 0, union, union + 1)
    safe_enc = torch.where(degenerate, enclosing + 1, enclosing)
    iou = torch.where(union > 0, inter / safe_union, torch.zeros_like(union))
    giou = iou - (enclosing - union) / safe_enc
    return torch.where(degenerate, torch.zeros_like(giou), giou)


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs IoU matrix, (N, 4) x (M, 4) center-form -> (N, M)."""
    return box_iou(a[:, None, :], b[None, :, :])


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs generalized IoU matrix, (N, 4) x (M, 4) center-form -> (N, M)."""
    return box_giou(a[:, None, :], b[None, :, :])


def iou(a: Box, b: Box) -> float:
    """Scalar IoU in [0, 1] of two Box values."""
    return float(box_iou(a.to_tensor(), b.to_tensor()))


def giou(a: Box, b: Box) -> float:
    """Scalar generalized IoU in (-1, 1] of two Box values."""
    return float(box_giou(a.to_tensor(), b.to_tensor()))
