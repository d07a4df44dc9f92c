"""Class-agnostic proposal generation support: matching and box losses.

Proposals are category-free (box, objectness) pairs produced by a query
decoder. Training is set prediction: a minimum-cost one-to-one assignment
between queries and ground-truth boxes decides which queries count as
objects, then the box loss pulls matched boxes onto their targets and
objectness toward the matched/unmatched labels. The network itself lives in
``model``; this module is the tensor-level math around it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .boxes import box_cxcywh_to_xyxy, giou, iou, pairwise_giou, pairwise_iou  # noqa: F401

DEFAULT_MATCH_COSTS = (2.0, 5.0, 2.0)  # (objectness, L1, giou)
_EPS = 1e-7


@dataclass(frozen=True)
class Proposal:
    """A candidate object: normalized (cx, cy, w, h) box plus objectness."""

    box: tuple[float, float, float, float]
    objectness: float

    def __post_init__(self) -> None:
        cx, cy, w, h = self.box
        if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise ValueError(f"box size must lie in (0, 1], got w={w}, h={h}")
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise ValueError(f"box center must lie in [0, 1]^2, got ({cx}, {cy})")
        if not np.isfinite(self.objectness) or not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness must lie in [0, 1], got {self.objectness}")

    @property
    def box_xyxy(self) -> tuple[float, float, float, float]:
        cx, cy, w, h = self.box
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class MatchResult:
    """One-to-one assignment between query indices and target indices."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_queries: tuple[int, ...]

    def __post_init__(self) -> None:
        q_seen = [q for q, _ in self.pairs]
        t_seen = [t for _, t in self.pairs]
        if len(set(q_seen)) != len(q_seen) or len(set(t_seen)) != len(t_seen):
            raise ValueError("a query or target appears in more than one pair")
        if set(q_seen) & set(self.unmatched_queries):
            raise ValueError("matched queries listed as unmatched")

    @property
    def query_to_target(self) -> dict[int, int]:
        return dict(self.pairs)


@dataclass(frozen=True)
class DecoderConfig:
    """Shape of the query decoder and where the two branches separate.

    ``split_layer`` (1-indexed) names the decoder layer whose query states
    feed any query-conditioned classifier; box and objectness heads always
    read the final layer. ``split_layer == num_layers`` couples the branches.
    """

    num_queries: int = 100
    num_layers: int = 6
    split_layer: int = 2
    hidden_dim: int = 128
    num_heads: int = 8
    num_encoder_layers: int = 1

    def __post_init__(self) -> None:
        if self.num_queries < 1:
            raise ValueError(f"num_queries must be >= 1, got {self.num_queries}")
        if not 1 <= self.split_layer <= self.num_layers:
            raise ValueError(
                f"split_layer must lie in [1, {self.num_layers}], got {self.split_layer}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")


def _unpack(proposals) -> tuple[Tensor, Tensor]:
    """Accept a list of Proposal or a (boxes, objectness) tensor pair."""
    if isinstance(proposals, (tuple, list)) and len(proposals) == 2 \
            and torch.is_tensor(proposals[0]):
        boxes, objectness = proposals
        return torch.as_tensor(boxes), torch.as_tensor(objectness)
    boxes = torch.tensor([p.box for p in proposals], dtype=torch.float64)
    objectness = torch.tensor([p.objectness for p in proposals], dtype=torch.float64)
    return boxes, objectness


def _as_target_boxes(targets, dtype: torch.dtype) -> Tensor:
    t = torch.as_tensor(targets)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    t = t.to(dtype)
    if t.numel() == 0:
        return t.reshape(0, 4)
    return t.reshape(-1, 4)


def match_cost_matrix(boxes: Tensor, objectness: Tensor, target_boxes: Tensor,
                      cost_weights: Sequence[float] = DEFAULT_MATCH_COSTS) -> Tensor:
    """Assignment cost (queries x targets): weighted no-objectness + L1 + (1 - GIoU)."""
    w_obj, w_l1, w_giou = cost_weights
    if min(cost_weights) < 0:
        raise ValueError(f"cost weights must be nonnegative, got {cost_weights}")
    l1 = torch.cdist(boxes, target_boxes, p=1)
    g = pairwise_giou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(target_boxes))
    return (w_obj * (1.0 - objectness)[:, None] + w_l1 * l1 + w_giou * (1.0 - g))


def bipartite_match(proposals, targets, cost_weights: Sequence[float] = DEFAULT_MATCH_COSTS,
                    ) -> MatchResult:
    """Minimum-total-cost one-to-one assignment of queries to target boxes.

    ``proposals`` is a list of :class:`Proposal` or a ``(boxes, objectness)``
    tensor pair in cxcywh form; ``targets`` is a (T, 4) array of cxcywh
    boxes. Every target is matched when there are at least as many queries.
    """
    boxes, objectness = _unpack(proposals)
    target_boxes = _as_target_boxes(targets, boxes.dtype)
    n_queries = boxes.shape[0]
    if target_boxes.shape[0] == 0:
        return MatchResult(pairs=(), unmatched_queries=tuple(range(n_queries)))

    with torch.no_grad():
        cost = match_cost_matrix(boxes, objectness, target_boxes, cost_weights)
    rows, cols = linear_sum_assignment(cost.cpu().numpy())
    pairs = tuple(sorted(zip(rows.tolist(), cols.tolist())))
    matched = {q for q, _ in pairs}
    unmatched = tuple(q for q in range(n_queries) if q not in matched)
    return MatchResult(pairs=pairs, unmatched_queries=unmatched)


@dataclass
class BoxLoss:
    """Weighted box-branch loss with its three components."""

    total: Tensor
    objectness_bce: Tensor
    l1: Tensor
    giou: Tensor


def box_loss(proposals, targets, match: MatchResult,
             loss_weights: Sequence[float] = DEFAULT_MATCH_COSTS) -> BoxLoss:
    """Objectness BCE over all queries plus L1 and (1 - GIoU) over matched boxes.

    Objectness labels are 1 for matched queries and 0 otherwise. The L1 term
    is the mean over matched pairs of the summed coordinate error in cxcywh
    form. All terms are nonnegative; the loss is zero exactly when every
    target is matched perfectly with objectness 1 and every unmatched query
    has objectness 0.
    """
    w_obj, w_l1, w_giou = loss_weights
    boxes, objectness = _unpack(proposals)
    target_boxes = _as_target_boxes(targets, boxes.dtype)

    labels = torch.zeros_like(objectness)
    for q, _ in match.pairs:
        labels[q] = 1.0
    p = objectness.clamp(_EPS, 1.0 - _EPS)
    bce = -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).mean()

    if match.pairs:
        q_idx = torch.tensor([q for q, _ in match.pairs], dtype=torch.long)
        t_idx = torch.tensor([t for _, t in match.pairs], dtype=torch.long)
        matched_boxes = boxes[q_idx]
        matched_targets = target_boxes[t_idx]
        l1 = (matched_boxes - matched_targets).abs().sum(dim=1).mean()
        g = giou(box_cxcywh_to_xyxy(matched_boxes), box_cxcywh_to_xyxy(matched_targets))
        giou_term = (1.0 - g).mean()
    else:
        l1 = boxes.sum() * 0.0
        giou_term = boxes.sum() * 0.0

    total = w_obj * bce + w_l1 * l1 + w_giou * giou_term
    return BoxLoss(total=total, objectness_bce=bce, l1=l1, giou=giou_term)


def generate_proposals(features, network) -> list[Proposal]:
    """Run a proposal network on one feature grid and wrap its outputs.

    ``network`` is a :class:`densealign.model.ProposalNetwork` (or anything
    with its ``propose`` method); the decoder always emits its full query
    budget, so the list length equals ``num_queries``.
    """
    boxes, objectness, _ = network.propose(features)
    return proposals_from_tensors(boxes, objectness)


def proposals_from_tensors(boxes: Tensor, objectness: Tensor) -> list[Proposal]:
    """Convert (Q, 4) cxcywh and (Q,) objectness tensors to Proposal objects."""
    boxes = boxes.detach().cpu()
    objectness = objectness.detach().cpu()
    return [Proposal(box=tuple(float(v) for v in boxes[i]),
                     objectness=float(objectness[i]))
            for i in range(boxes.shape[0])]


def split_branches(decoder_states: Tensor, cfg: DecoderConfig) -> tuple[Tensor, Tensor]:
    """Pick the branch inputs out of the per-layer query states.

    ``decoder_states`` stacks one state per decoder layer (first axis). The
    box/objectness branch reads the final layer; the classification branch
    reads layer ``cfg.split_layer`` (1-indexed). With the dense-map
    classifier the second output is unused, but the coupled baseline trains
    a query classifier on it.
    """
    if decoder_states.shape[0] != cfg.num_layers:
        raise ValueError(
            f"{decoder_states.shape[0]} layer states but config says {cfg.num_layers}")
    return decoder_states[-1], decoder_states[cfg.split_layer - 1]


def write_proposals_jsonl(path: str | Path, proposals_per_image: dict[int, Sequence[Proposal]],
                          ) -> None:
    """Dump proposals as JSON lines {image_id, box: [cx,cy,w,h], objectness}."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for image_id in sorted(proposals_per_image):
            for prop in proposals_per_image[image_id]:
                fh.write(json.dumps({"image_id": image_id,
                                     "box": [round(v, 6) for v in prop.box],
                                     "objectness": round(prop.objectness, 6)}) + "\n")
