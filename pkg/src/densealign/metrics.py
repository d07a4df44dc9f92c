"""Evaluation: generalized open-vocabulary AP50, proposal recall, diagnostics.

AP is computed per category with the detector scoring the full target
vocabulary (base and novel together), then averaged within the base subset,
the novel subset, and overall. Proposal quality is the class-agnostic
average recall of the top-N proposals over IoU thresholds 0.5:0.05:0.95.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .boxes import pairwise_iou
from .datasets import BoxAnnotation, ImageSample
from .encoders import FrozenImageEncoder
from .vocab import CategoryVocabulary, EmbeddingMatrix

AR_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# COCO-convention area buckets at 800px reference resolution
_SMALL_AREA = 32.0 ** 2
_MEDIUM_AREA = 96.0 ** 2
_REFERENCE_SIDE = 800.0


@dataclass(frozen=True)
class CategoryAP:
    name: str
    ap50: float | None  # None when the category has no ground truth
    support: int


@dataclass(frozen=True)
class EvalReport:
    """Box AP50 with base/novel breakdown plus top-N proposal recall."""

    ap50_all: float | None
    ap50_base: float | None
    ap50_novel: float | None
    ar_topn: float
    ar_small: float | None
    ar_medium: float | None
    ar_large: float | None
    n_top: int
    per_category: tuple[CategoryAP, ...]

    def to_dict(self) -> dict:
        return {
            "ap50": self.ap50_all, "ap50_base": self.ap50_base,
            "ap50_novel": self.ap50_novel,
            "ar": {"n": self.n_top, "all": self.ar_topn, "small": self.ar_small,
                   "medium": self.ar_medium, "large": self.ar_large},
            "per_category": [{"name": c.name, "ap50": c.ap50, "support": c.support}
                             for c in self.per_category],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _fmt(value: float | None) -> str:
    return "  -  " if value is None else f"{value:5.3f}"


def format_report_table(report: EvalReport) -> str:
    """Aligned plain-text table of the headline metrics and per-category APs."""
    lines = [
        f"{'AP50':>10} {'AP50_base':>10} {'AP50_novel':>10} "
        f"{'AR@' + str(report.n_top):>8} {'AR_S':>6} {'AR_M':>6} {'AR_L':>6}",
        f"{_fmt(report.ap50_all):>10} {_fmt(report.ap50_base):>10} "
        f"{_fmt(report.ap50_novel):>10} {_fmt(report.ar_topn):>8} "
        f"{_fmt(report.ar_small):>6} {_fmt(report.ar_medium):>6} {_fmt(report.ar_large):>6}",
        "",
        f"{'category':<20} {'AP50':>6} {'support':>8}",
    ]
    for cat in report.per_category:
        lines.append(f"{cat.name:<20} {_fmt(cat.ap50):>6} {cat.support:>8}")
    return "\n".join(lines)


def _interpolated_ap(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """101-point interpolated average precision."""
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recalls >= r - 1e-12
        ap += float(precisions[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def _category_ap(detections: list[tuple[int, float, tuple]], gt_boxes: dict[int, list[tuple]],
                 iou_threshold: float = 0.5) -> tuple[float | None, int]:
    support = sum(len(b) for b in gt_boxes.values())
    if support == 0:
        return None, 0
    if not detections:
        return 0.0, support

    # stable sort: ties in confidence keep insertion order
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    matched: dict[int, set[int]] = {img: set() for img in gt_boxes}
    tp = np.zeros(len(order))
    for rank, det_idx in enumerate(order):
        img, _, box = detections[det_idx]
        candidates = gt_boxes.get(img, [])
        if not candidates:
            continue
        ious = pairwise_iou(torch.tensor([box], dtype=torch.float64),
                            torch.tensor(candidates, dtype=torch.float64))[0].numpy()
        ious[list(matched[img])] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            matched[img].add(best)
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    precisions = cum_tp / np.arange(1, len(order) + 1)
    recalls = cum_tp / support
    return _interpolated_ap(recalls, precisions), support


def ap50_generalized(detections_by_image: Mapping[int, Sequence],
                     gt_by_image: Mapping[int, Sequence[BoxAnnotation]],
                     vocab: CategoryVocabulary,
                     restrict_to: Sequence[str] | None = None,
                     ) -> tuple[list[CategoryAP], dict]:
    """Per-category AP50 plus base/novel/all means over categories with support.

    Detections need ``category``, ``score``, and normalized-xyxy ``box``
    attributes; each image's ground truth is its annotation list. Greedy
    matching at IoU >= 0.5, one match per ground-truth box, 101-point
    interpolated AP. Categories outside ``restrict_to`` (the vocabulary the
    detector actually scored, when given) are reported with zero support.
    """
    active = set(restrict_to) if restrict_to is not None else None
    per_category = []
    for name in vocab.names("target"):
        if active is not None and name not in active:
            per_category.append(CategoryAP(name=name, ap50=None, support=0))
            continue
        dets = []
        for img in sorted(detections_by_image):
            for d in detections_by_image[img]:
                if d.category == name:
                    dets.append((img, float(d.score), tuple(d.box)))
        gts = {img: [tuple(a.box) for a in gt_by_image.get(img, []) if a.category == name]
               for img in sorted(gt_by_image)}
        ap, support = _category_ap(dets, gts)
        per_category.append(CategoryAP(name=name, ap50=ap, support=support))

    def mean_over(names: Sequence[str]) -> float | None:
        values = [c.ap50 for c in per_category if c.name in set(names) and c.support > 0]
        return float(np.mean(values)) if values else None

    means = {"all": mean_over(vocab.names("target")),
             "base": mean_over(vocab.base_names),
             "novel": mean_over(vocab.novel_names)}
    return per_category, means


def average_recall_topn(proposals_by_image: Mapping[int, Sequence],
                        gt_by_image: Mapping[int, Sequence[BoxAnnotation]],
                        n: int, image_sizes: Mapping[int, tuple[int, int]]) -> dict:
    """Class-agnostic AR of the top-N proposals, with size breakdown.

    Per image the N highest-objectness proposals are kept; a ground-truth box
    counts as recalled at threshold t when some kept proposal reaches IoU >=
    t. AR averages the recall over thresholds 0.5:0.05:0.95 and all ground
    truth. Size buckets follow ground-truth pixel area, with the 32^2/96^2
    cutoffs scaled by (image_side / 800)^2.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")

    best_iou: list[float] = []
    buckets: list[str] = []
    for img in sorted(gt_by_image):
        gts = list(gt_by_image[img])
        if not gts:
            continue
        height, width = image_sizes[img]
        scale = (np.sqrt(height * width) / _REFERENCE_SIDE) ** 2
        props = sorted(proposals_by_image.get(img, []),
                       key=lambda p: -p.objectness)[:n]
        gt_boxes = torch.tensor([a.box for a in gts], dtype=torch.float64)
        if props:
            prop_boxes = torch.tensor([p.box_xyxy for p in props], dtype=torch.float64)
            prop_boxes[:, 0::2] = prop_boxes[:, 0::2].clamp(0.0, 1.0)
            prop_boxes[:, 1::2] = prop_boxes[:, 1::2].clamp(0.0, 1.0)
            ious = pairwise_iou(gt_boxes, prop_boxes).max(dim=1).values.numpy()
        else:
            ious = np.zeros(len(gts))
        for ann, iou_val in zip(gts, ious):
            x1, y1, x2, y2 = ann.box
            area = (x2 - x1) * (y2 - y1) * height * width
            if area < _SMALL_AREA * scale:
                buckets.append("small")
            elif area < _MEDIUM_AREA * scale:
                buckets.append("medium")
            else:
                buckets.append("large")
            best_iou.append(float(iou_val))

    def recall_of(indices: list[int]) -> float | None:
        if not indices:
            return None
        hits = [np.mean([best_iou[i] >= t for i in indices]) for t in AR_IOU_THRESHOLDS]
        return float(np.mean(hits))

    all_indices = list(range(len(best_iou)))
    return {
        "all": recall_of(all_indices) if all_indices else 0.0,
        "small": recall_of([i for i in all_indices if buckets[i] == "small"]),
        "medium": recall_of([i for i in all_indices if buckets[i] == "medium"]),
        "large": recall_of([i for i in all_indices if buckets[i] == "large"]),
    }


def build_report(per_category: list[CategoryAP], ap_means: dict, ar: dict, n_top: int,
                 ) -> EvalReport:
    return EvalReport(ap50_all=ap_means["all"], ap50_base=ap_means["base"],
                      ap50_novel=ap_means["novel"], ar_topn=ar["all"],
                      ar_small=ar["small"], ar_medium=ar["medium"], ar_large=ar["large"],
                      n_top=n_top, per_category=tuple(per_category))


def _crop_around(pixels: np.ndarray, box: tuple[float, float, float, float],
                 pad: int, min_side: int) -> np.ndarray:
    height, width = pixels.shape[:2]
    x1 = int(np.floor(box[0] * width)) - pad
    y1 = int(np.floor(box[1] * height)) - pad
    x2 = int(np.ceil(box[2] * width)) + pad
    y2 = int(np.ceil(box[3] * height)) + pad
    while x2 - x1 < min_side:
        x1 -= 1
        x2 += 1
    while y2 - y1 < min_side:
        y1 -= 1
        y2 += 1
    x1, y1 = max(0, x1), max(0, y1)
    x2, y2 = min(width, x2), min(height, y2)
    return pixels[y1:y2, x1:x2]


def novel_base_similarity_ranking(samples: Sequence[ImageSample],
                                  img_encoder: FrozenImageEncoder,
                                  base_emb: EmbeddingMatrix,
                                  vocab: CategoryVocabulary,
                                  samples_per_category: int = 200,
                                  crop_pad: int = 2, seed: int = 0,
                                  ) -> list[tuple[str, float]]:
    """Rank novel categories by how close their objects look to the base classifier.

    For each novel category, sample annotated instances, crop them, and take
    the frozen encoder's image-level feature; the category's score is the
    mean (over crops) of the maximum cosine against the base text embeddings.
    Returned sorted descending: the head of the list is where base-overfit
    classifiers confuse novel objects most.
    """
    rng = np.random.default_rng(seed)
    rows = torch.as_tensor(base_emb.rows, dtype=torch.float64)
    ranking = []
    for name in vocab.novel_names:
        instances = [(s, a) for s in samples for a in s.annotations if a.category == name]
        if not instances:
            warnings.warn(f"novel category {name!r} has no instances; skipped")
            continue
        if len(instances) > samples_per_category:
            chosen = rng.choice(len(instances), size=samples_per_category, replace=False)
            instances = [instances[int(i)] for i in chosen]
        sims = []
        for sample, ann in instances:
            crop = _crop_around(sample.pixels, ann.box, crop_pad,
                                min_side=2 * img_encoder.stride)
            feat = img_encoder.pooled_class_token(crop).to(torch.float64)
            feat = feat / torch.linalg.vector_norm(feat)
            sims.append(float((rows @ feat).max()))
        ranking.append((name, float(np.mean(sims))))
    ranking.sort(key=lambda item: -item[1])
    return ranking
