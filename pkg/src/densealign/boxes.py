"""Box coordinate conversions and overlap measures.

All boxes are axis-aligned. Two layouts appear in the codebase:
``cxcywh`` (center x, center y, width, height) for regression targets and
``xyxy`` (x1, y1, x2, y2) for overlap computations. Coordinates are
normalized to [0, 1] unless a function says otherwise; the math itself is
scale-free.
"""

from __future__ import annotations

import torch
from torch import Tensor


def _as_float_tensor(value) -> Tensor:
    """Convert to a tensor, promoting non-float inputs to the default float dtype."""
    t = torch.as_tensor(value)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    return t


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    """Convert (..., 4) center-size boxes to corner form."""
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    """Convert (..., 4) corner boxes to center-size form."""
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1], dim=-1)


def _check_valid_xyxy(boxes: Tensor, name: str) -> None:
    if boxes.shape[-1] != 4:
        raise ValueError(f"{name} must have 4 coordinates, got shape {tuple(boxes.shape)}")
    if torch.any(boxes[..., 2] < boxes[..., 0]) or torch.any(boxes[..., 3] < boxes[..., 1]):
        raise ValueError(f"{name} contains a negative-area box")


def iou(box_a: Tensor, box_b: Tensor) -> Tensor:
    """Intersection over union of two xyxy boxes (elementwise on leading dims).

    Returns 0 where the union is empty (two degenerate boxes).
    """
    box_a = _as_float_tensor(box_a)
    box_b = _as_float_tensor(box_b)
    _check_valid_xyxy(box_a, "box_a")
    _check_valid_xyxy(box_b, "box_b")

    lt = torch.maximum(box_a[..., :2], box_b[..., :2])
    rb = torch.minimum(box_a[..., 2:], box_b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (box_a[..., 2] - box_a[..., 0]) * (box_a[..., 3] - box_a[..., 1])
    area_b = (box_b[..., 2] - box_b[..., 0]) * (box_b[..., 3] - box_b[..., 1])
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / torch.where(union > 0, union, torch.ones_like(union)),
                       torch.zeros_like(union))


def giou(box_a: Tensor, box_b: Tensor) -> Tensor:
    """Generalized IoU: IoU minus the hull area not covered by the union, over the hull.

    Lies in [-1, 1]; equals IoU exactly when the hull coincides with the union.
    """
    box_a = _as_float_tensor(box_a)
    box_b = _as_float_tensor(box_b)
    base = iou(box_a, box_b)

    lt = torch.maximum(box_a[..., :2], box_b[..., :2])
    rb = torch.minimum(box_a[..., 2:], box_b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (box_a[..., 2] - box_a[..., 0]) * (box_a[..., 3] - box_a[..., 1])
    area_b = (box_b[..., 2] - box_b[..., 0]) * (box_b[..., 3] - box_b[..., 1])
    union = area_a + area_b - inter

    hull_lt = torch.minimum(box_a[..., :2], box_b[..., :2])
    hull_rb = torch.maximum(box_a[..., 2:], box_b[..., 2:])
    hull_wh = (hull_rb - hull_lt).clamp(min=0)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    excess = torch.where(hull > 0, (hull - union) / torch.where(hull > 0, hull, torch.ones_like(hull)),
                         torch.zeros_like(hull))
    return base - excess


def pairwise_iou(boxes_a: Tensor, boxes_b: Tensor) -> Tensor:
    """IoU matrix between an (N, 4) and an (M, 4) set of xyxy boxes."""
    boxes_a = _as_float_tensor(boxes_a)
    boxes_b = _as_float_tensor(boxes_b)
    if boxes_a.numel() == 0 or boxes_b.numel() == 0:
        return torch.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=boxes_a.dtype)
    return iou(boxes_a[:, None, :], boxes_b[None, :, :])


def pairwise_giou(boxes_a: Tensor, boxes_b: Tensor) -> Tensor:
    """Generalized-IoU matrix between an (N, 4) and an (M, 4) set of xyxy boxes."""
    boxes_a = _as_float_tensor(boxes_a)
    boxes_b = _as_float_tensor(boxes_b)
    if boxes_a.numel() == 0 or boxes_b.numel() == 0:
        return torch.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=boxes_a.dtype)
    return giou(boxes_a[:, None, :], boxes_b[None, :, :])
