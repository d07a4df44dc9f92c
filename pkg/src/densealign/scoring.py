"""Dense per-location classification and proposal scoring.

The pipeline here is the heart of the detector: cosine-compare every grid
feature against the text-embedding classifier and softmax over categories
(detector map), do the same with the frozen encoder's masked patch
embeddings (frozen map), fuse the two maps with a per-element geometric
mean, then score each class-agnostic proposal by RoI-aligning the fused map
and averaging the top-k scores per category. Keeping classification dense
until the very last pooling step is what lets unseen categories keep their
local semantics instead of collapsing onto the training classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .boxes import box_cxcywh_to_xyxy
from .encoders import FrozenImageEncoder, PatchGrid, masked_dense_embeddings
from .proposals import Proposal
from .vocab import EmbeddingMatrix


@dataclass
class DenseScoreMap:
    """Per-location, per-category scores on a strided grid.

    Probability maps (softmax output) sum to 1 at every location; fused maps
    are elementwise products of powers of probabilities and are deliberately
    not renormalized, so they only promise entries in [0, 1].
    """

    probs: Tensor  # (h, w, C)
    category_names: tuple[str, ...]
    stride: int
    fused: bool = False

    def __post_init__(self) -> None:
        self.probs = torch.as_tensor(self.probs)
        if self.probs.ndim != 3:
            raise ValueError(f"score map must be h x w x C, got {tuple(self.probs.shape)}")
        if self.probs.shape[2] != len(self.category_names):
            raise ValueError(
                f"{self.probs.shape[2]} channels but {len(self.category_names)} names")
        with torch.no_grad():
            if not bool(torch.isfinite(self.probs).all()):
                raise ValueError("score map contains non-finite values")
            if float(self.probs.min()) < 0.0 or float(self.probs.max()) > 1.0 + 1e-6:
                raise ValueError("score map entries must lie in [0, 1]")
            if not self.fused:
                sums = self.probs.sum(dim=2)
                if float((sums - 1.0).abs().max()) > 1e-5:
                    raise ValueError("probability map locations must sum to 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.probs.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class TopKMask:
    """Boolean mask of the k highest scores per category channel."""

    mask: Tensor  # (h', w', C) bool
    k: int

    def __post_init__(self) -> None:
        h, w, c = self.mask.shape
        expected = min(self.k, h * w)
        counts = self.mask.reshape(-1, c).sum(dim=0)
        if not bool((counts == expected).all()):
            raise ValueError(f"each channel must select exactly {expected} entries")


@dataclass(frozen=True)
class DenseScoringConfig:
    """Knobs for dense scoring and proposal classification.

    ``tau`` scales cosine similarities before the per-location softmax (small
    values sharpen the map; CLIP-style logit scaling corresponds to 0.01).
    ``lam`` weights the frozen encoder's map in the geometric fusion.
    ``roi_size`` and ``k`` control RoI pooling: each proposal is aligned to a
    ``roi_size`` score patch and the top ``k`` scores per category are
    averaged, letting non-object cells inside the box keep their own
    semantics.
    """

    tau: float = 0.01
    lam: float = 0.25
    roi_size: tuple[int, int] = (14, 14)
    k: int = 144
    fuse_levels: tuple[int, ...] = (2, 3)

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        h, w = self.roi_size
        if h < 1 or w < 1:
            raise ValueError(f"roi_size must be positive, got {self.roi_size}")
        if not 1 <= self.k <= h * w:
            raise ValueError(f"k must lie in [1, {h * w}], got {self.k}")
        if not self.fuse_levels:
            raise ValueError("fuse_levels must name at least one backbone stage")


@dataclass
class ProposalScores:
    """Per-category scores for one proposal, plus the argmax decision."""

    proposal: Proposal
    scores: Tensor  # (C,)
    category_names: tuple[str, ...]
    label: str
    confidence: float


def detector_dense_probs(features: PatchGrid, emb: EmbeddingMatrix, tau: float,
                         ) -> DenseScoreMap:
    """Softmax over categories of cosine(feature, embedding row) / tau, per location."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if features.dim != emb.dim:
        raise ValueError(f"feature dim {features.dim} != embedding dim {emb.dim}")
    feats = F.normalize(features.values, dim=2, eps=1e-12)
    rows = torch.as_tensor(emb.rows, dtype=feats.dtype)
    logits = (feats @ rows.T) / tau
    return DenseScoreMap(probs=torch.softmax(logits, dim=2),
                         category_names=tuple(emb.category_names),
                         stride=features.stride)


def clip_dense_probs(img_encoder: FrozenImageEncoder, image: np.ndarray,
                     emb: EmbeddingMatrix, tau: float) -> DenseScoreMap:
    """Dense probability map of the frozen encoder via its masked pooling pass."""
    grid = masked_dense_embeddings(img_encoder, image)
    return detector_dense_probs(grid, emb, tau)


def fuse_score_maps(s_det: DenseScoreMap, s_clip: DenseScoreMap, lam: float,
                    ) -> DenseScoreMap:
    """Elementwise geometric fusion ``s_det^(1-lam) * s_clip^lam``.

    The result is intentionally not renormalized per location. At lam = 0 or
    1 the corresponding input is returned exactly.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    if s_det.shape != s_clip.shape:
        raise ValueError(f"shape mismatch {s_det.shape} vs {s_clip.shape}")
    if s_det.category_names != s_clip.category_names:
        raise ValueError("category order differs between the maps being fused")
    if lam == 0.0:
        fused = s_det.probs.clone()
    elif lam == 1.0:
        fused = s_clip.probs.to(s_det.probs.dtype).clone()
    else:
        fused = s_det.probs.pow(1.0 - lam) * s_clip.probs.to(s_det.probs.dtype).pow(lam)
    return DenseScoreMap(probs=fused, category_names=s_det.category_names,
                         stride=s_det.stride, fused=True)


def _as_values(score_map: DenseScoreMap | Tensor) -> Tensor:
    return score_map.probs if isinstance(score_map, DenseScoreMap) else torch.as_tensor(score_map)


def roi_align(score_map: DenseScoreMap | Tensor, box: Sequence[float],
              out_size: tuple[int, int]) -> Tensor:
    """Bilinearly sample a box region of the map to a fixed-size grid.

    ``box`` is (x1, y1, x2, y2) normalized to the image. Each output cell
    takes one bilinear sample at its center, with half-pixel alignment (map
    cell centers sit at integer grid coordinates) and clamping at borders.
    Linear in the map values, and differentiable through them.
    """
    values = _as_values(score_map)
    if values.ndim != 3:
        raise ValueError(f"score values must be h x w x C, got {tuple(values.shape)}")
    x1, y1, x2, y2 = (float(c) for c in box)
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"box {box} has non-positive area")
    if min(x1, y1) < -1e-6 or max(x2, y2) > 1.0 + 1e-6:
        raise ValueError(f"box {box} lies outside [0, 1]^2")
    out_h, out_w = out_size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"out_size must be positive, got {out_size}")

    h, w = values.shape[:2]
    ys = y1 + (torch.arange(out_h, dtype=values.dtype) + 0.5) / out_h * (y2 - y1)
    xs = x1 + (torch.arange(out_w, dtype=values.dtype) + 0.5) / out_w * (x2 - x1)
    us = (ys * h - 0.5).clamp(0.0, float(h - 1))
    vs = (xs * w - 0.5).clamp(0.0, float(w - 1))

    i0 = us.floor().long()
    j0 = vs.floor().long()
    i1 = (i0 + 1).clamp(max=h - 1)
    j1 = (j0 + 1).clamp(max=w - 1)
    fy = (us - i0.to(values.dtype)).reshape(-1, 1, 1)
    fx = (vs - j0.to(values.dtype)).reshape(1, -1, 1)

    top = values[i0][:, j0] * (1 - fx) + values[i0][:, j1] * fx
    bottom = values[i1][:, j0] * (1 - fx) + values[i1][:, j1] * fx
    return top * (1 - fy) + bottom * fy


def roi_align_many(score_map: DenseScoreMap | Tensor, boxes: Tensor,
                   out_size: tuple[int, int]) -> Tensor:
    """Vectorized :func:`roi_align` over an (N, 4) batch of xyxy boxes."""
    values = _as_values(score_map)
    boxes = torch.as_tensor(boxes, dtype=values.dtype)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError(f"boxes must be N x 4, got {tuple(boxes.shape)}")
    if torch.any(boxes[:, 2] <= boxes[:, 0]) or torch.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("a box has non-positive area")
    if float(boxes.min()) < -1e-6 or float(boxes.max()) > 1.0 + 1e-6:
        raise ValueError("a box lies outside [0, 1]^2")
    out_h, out_w = out_size

    h, w = values.shape[:2]
    cy = (torch.arange(out_h, dtype=values.dtype) + 0.5) / out_h
    cx = (torch.arange(out_w, dtype=values.dtype) + 0.5) / out_w
    ys = boxes[:, 1:2] + cy[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])  # (N, h')
    xs = boxes[:, 0:1] + cx[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])  # (N, w')
    us = (ys * h - 0.5).clamp(0.0, float(h - 1))
    vs = (xs * w - 0.5).clamp(0.0, float(w - 1))

    i0 = us.floor().long()
    j0 = vs.floor().long()
    i1 = (i0 + 1).clamp(max=h - 1)
    j1 = (j0 + 1).clamp(max=w - 1)
    fy = (us - i0.to(values.dtype))[:, :, None, None]  # (N, h', 1, 1)
    fx = (vs - j0.to(values.dtype))[:, None, :, None]  # (N, 1, w', 1)

    ia = i0[:, :, None]
    ib = i1[:, :, None]
    ja = j0[:, None, :]
    jb = j1[:, None, :]
    top = values[ia, ja] * (1 - fx) + values[ia, jb] * fx
    bottom = values[ib, ja] * (1 - fx) + values[ib, jb] * fx
    return top * (1 - fy) + bottom * fy


def topk_masked_mean_many(roi_scores: Tensor, k: int) -> Tensor:
    """:func:`topk_masked_mean` over an (N, h', w', C) stack; returns (N, C)."""
    n, h, w, c = roi_scores.shape
    if not 1 <= k <= h * w:
        raise ValueError(f"k must lie in [1, {h * w}], got {k}")
    flat = roi_scores.reshape(n, h * w, c)
    return torch.topk(flat, k, dim=1).values.mean(dim=1)


def topk_mask(roi_scores: Tensor, k: int) -> TopKMask:
    """Mask of the k largest scores per category channel."""
    h, w, c = roi_scores.shape
    k_eff = min(k, h * w)
    flat = roi_scores.reshape(-1, c)
    idx = torch.topk(flat, k_eff, dim=0).indices
    mask = torch.zeros_like(flat, dtype=torch.bool)
    mask.scatter_(0, idx, True)
    return TopKMask(mask=mask.reshape(h, w, c), k=k)


def topk_masked_mean(roi_scores: Tensor, k: int) -> Tensor:
    """Mean of the k largest scores per category, independently per channel."""
    if roi_scores.ndim != 3:
        raise ValueError(f"roi scores must be h' x w' x C, got {tuple(roi_scores.shape)}")
    h, w, _ = roi_scores.shape
    if not 1 <= k <= h * w:
        raise ValueError(f"k must lie in [1, {h * w}], got {k}")
    flat = roi_scores.reshape(h * w, -1)
    return torch.topk(flat, k, dim=0).values.mean(dim=0)


def classify_proposals(score_map: DenseScoreMap, proposals: Sequence[Proposal],
                       cfg: DenseScoringConfig, objectness_weight: bool = True,
                       ) -> list[ProposalScores]:
    """Score each proposal against every category of the map.

    Per proposal: RoI-align the map to ``cfg.roi_size``, average the top-k
    scores per category, label with the argmax. Confidence is the winning
    score, by default multiplied by the proposal's objectness so weak boxes
    rank below confident ones. Boxes crossing the image border are scored on
    their visible part.
    """
    if not proposals:
        return []
    xyxy = box_cxcywh_to_xyxy(
        torch.tensor([p.box for p in proposals], dtype=_as_values(score_map).dtype))
    xyxy = clamp_boxes_unit(xyxy)
    rois = roi_align_many(score_map, xyxy, cfg.roi_size)
    scores = topk_masked_mean_many(rois, cfg.k)
    results = []
    for i, prop in enumerate(proposals):
        idx = int(torch.argmax(scores[i]))
        confidence = float(scores[i, idx])
        if objectness_weight:
            confidence *= prop.objectness
        results.append(ProposalScores(proposal=prop, scores=scores[i],
                                      category_names=score_map.category_names,
                                      label=score_map.category_names[idx],
                                      confidence=confidence))
    return results


def clamp_boxes_unit(boxes: Tensor, min_extent: float = 1e-4) -> Tensor:
    """Clamp xyxy boxes into [0, 1]^2, keeping a minimal positive extent."""
    x1 = boxes[:, 0].clamp(0.0, 1.0 - min_extent)
    y1 = boxes[:, 1].clamp(0.0, 1.0 - min_extent)
    x2 = torch.maximum(boxes[:, 2].clamp(0.0, 1.0), x1 + min_extent)
    y2 = torch.maximum(boxes[:, 3].clamp(0.0, 1.0), y1 + min_extent)
    return torch.stack([x1, y1, x2, y2], dim=1)


def fuse_backbone_levels(levels: Sequence[PatchGrid], projections=None) -> PatchGrid:
    """Merge multi-resolution feature grids onto the shallowest level's grid.

    Deeper levels are bilinearly upsampled to the finest resolution, each
    level goes through its projection (a callable such as ``nn.Linear``
    mapping its dim to the shared one; identity if omitted), and the results
    are averaged.
    """
    if not levels:
        raise ValueError("need at least one feature level")
    if projections is not None and len(projections) != len(levels):
        raise ValueError(f"{len(projections)} projections for {len(levels)} levels")

    finest = min(levels, key=lambda g: g.stride)
    out_h, out_w = finest.values.shape[:2]
    merged = []
    for idx, level in enumerate(levels):
        vals = level.values
        if vals.shape[:2] != (out_h, out_w):
            chw = vals.permute(2, 0, 1).unsqueeze(0)
            chw = F.interpolate(chw, size=(out_h, out_w), mode="bilinear",
                                align_corners=False)
            vals = chw.squeeze(0).permute(1, 2, 0)
        if projections is not None:
            vals = projections[idx](vals)
        merged.append(vals)
    if len({m.shape[2] for m in merged}) != 1:
        raise ValueError("levels must share a feature dim after projection")
    return PatchGrid(values=torch.stack(merged).mean(dim=0), stride=finest.stride)


def export_semantic_maps(score_map: DenseScoreMap, out_dir: str | Path,
                         categories: Sequence[str] | None = None) -> list[Path]:
    """Write per-category grayscale heatmaps and an argmax label map as PNGs.

    Heatmap pixel values are ``round(255 * prob)``. The label map is an
    indexed PNG whose palette assigns one color per category. Returns the
    written paths (heatmaps in request order, then the label map).
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(categories) if categories is not None else list(score_map.category_names)
    unknown = [n for n in names if n not in score_map.category_names]
    if unknown:
        raise ValueError(f"categories not in score map: {unknown}")

    probs = score_map.probs.detach().to(torch.float64).numpy()
    written = []
    for name in names:
        channel = probs[:, :, score_map.category_names.index(name)]
        pixels = np.clip(np.rint(channel * 255.0), 0, 255).astype(np.uint8)
        path = out_dir / f"heatmap_{name.replace(' ', '_')}.png"
        Image.fromarray(pixels, mode="L").save(path)
        written.append(path)

    labels = np.argmax(probs, axis=2).astype(np.uint8)
    palette_img = Image.fromarray(labels, mode="P")
    rng = np.random.default_rng(0)
    palette = rng.integers(40, 255, size=(256, 3), dtype=np.uint8)
    palette[0] = (20, 20, 20)
    palette_img.putpalette(palette.flatten().tolist())
    label_path = out_dir / "argmax_labels.png"
    palette_img.save(label_path)
    written.append(label_path)
    return written
