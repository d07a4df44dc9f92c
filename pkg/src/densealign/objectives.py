"""Training objectives, the optimization step, inference, and checkpoints.

One training step combines three terms: the set-prediction box loss from the
proposal branch, a cross-entropy over each matched proposal's dense-map
scores (or, in the coupled-baseline mode, over its query-state similarity
to the classifier rows), and a global term pulling the mean-pooled detector
features toward the frozen encoder's image-level token. The frozen encoder
never receives gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import json

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .boxes import box_cxcywh_to_xyxy
from .datasets import ImageSample, batch_iterator
from .encoders import FrozenImageEncoder, PatchGrid
from .exceptions import LoadError, NumericError
from .model import OpenVocabDetector
from .proposals import (MatchResult, Proposal, bipartite_match, box_loss, pairwise_iou,
                        proposals_from_tensors, split_branches)
from .scoring import (DenseScoringConfig, DenseScoreMap, ProposalScores, clamp_boxes_unit,
                      classify_proposals, detector_dense_probs, fuse_score_maps,
                      roi_align_many, topk_masked_mean_many)
from .vocab import EmbeddingMatrix

_EPS = 1e-9


@dataclass(frozen=True)
class LossBundle:
    """The three loss terms of one step and their weighted total."""

    l_box: float
    l_cls: float
    l_g: float
    weights: tuple[float, float, float]
    total: float = field(init=False)

    def __post_init__(self) -> None:
        values = (self.l_box, self.l_cls, self.l_g)
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise NumericError(f"loss terms must be finite and nonnegative, got {values}")
        w_box, w_cls, w_g = self.weights
        object.__setattr__(
            self, "total", w_box * self.l_box + w_cls * self.l_cls + w_g * self.l_g)


@dataclass(frozen=True)
class Detection:
    """A labeled, scored output box in normalized xyxy coordinates."""

    category: str
    score: float
    box: tuple[float, float, float, float]


def classification_loss(proposal_scores, match: MatchResult,
                        target_labels: Sequence[int | None]) -> Tensor:
    """Mean cross-entropy of matched proposals' renormalized category scores.

    ``proposal_scores`` is a (Q, C) tensor or a list of
    :class:`ProposalScores` indexed by query. Scores are renormalized across
    categories to form the predictive distribution (fused maps do not sum to
    one). Targets with a ``None`` label (box-only supervision) and unmatched
    queries contribute nothing; with no labeled matches the loss is 0.
    """
    if isinstance(proposal_scores, torch.Tensor):
        score_rows = proposal_scores
    else:
        score_rows = torch.stack([ps.scores for ps in proposal_scores])
    terms = []
    for q, t in match.pairs:
        label = target_labels[t]
        if label is None:
            continue
        row = score_rows[q]
        probs = row / (row.sum() + _EPS)
        terms.append(-torch.log(probs[label] + _EPS))
    if not terms:
        return score_rows.sum() * 0.0
    return torch.stack(terms).mean()


def global_alignment_loss(detector_features: PatchGrid, img_encoder: FrozenImageEncoder,
                          image: np.ndarray) -> Tensor:
    """Mean absolute difference between pooled detector features and the class token."""
    token = img_encoder.pooled_class_token(image)
    return global_alignment_from_token(detector_features, token)


def global_alignment_from_token(detector_features: PatchGrid, class_token: Tensor) -> Tensor:
    """Same loss given a precomputed (frozen, gradient-free) class token."""
    pooled = detector_features.values.mean(dim=(0, 1))
    token = torch.as_tensor(class_token, dtype=pooled.dtype).detach()
    if token.numel() != pooled.numel():
        raise ValueError(f"feature dim {pooled.numel()} != token dim {token.numel()}")
    return (pooled - token.reshape(-1)).abs().mean()


def object_level_baseline_loss(query_embeds: Tensor, emb: EmbeddingMatrix,
                               match: MatchResult, target_labels: Sequence[int | None],
                               tau: float) -> Tensor:
    """Conventional late alignment: cross-entropy of query/text cosine softmax.

    ``query_embeds`` is (Q, d) in the text-embedding space (the model's
    projection head output). Kept as the ablation baseline that the dense
    path is measured against.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if query_embeds.shape[1] != emb.dim:
        raise ValueError(f"query dim {query_embeds.shape[1]} != embedding dim {emb.dim}")
    rows = torch.as_tensor(emb.rows, dtype=query_embeds.dtype)
    cos = F.normalize(query_embeds, dim=1, eps=1e-12) @ rows.T
    logprobs = torch.log_softmax(cos / tau, dim=1)
    terms = []
    for q, t in match.pairs:
        label = target_labels[t]
        if label is None:
            continue
        terms.append(-logprobs[q, label])
    if not terms:
        return query_embeds.sum() * 0.0
    return torch.stack(terms).mean()


# ---------------------------------------------------------------------------
# training state


class FrozenContext:
    """Caches the frozen encoder's masked grids and class tokens per image."""

    def __init__(self, image_encoder: FrozenImageEncoder):
        self.image_encoder = image_encoder
        self._cache: dict[tuple, tuple[PatchGrid, Tensor]] = {}

    def get(self, sample: ImageSample) -> tuple[PatchGrid, Tensor]:
        key = sample.cache_key
        if key not in self._cache:
            tokens = self.image_encoder.backbone(sample.pixels)
            masked = self.image_encoder.pool_masked(tokens)
            cls = self.image_encoder.pool_class_token(tokens)
            self._cache[key] = (masked, cls)
        return self._cache[key]


@dataclass
class TrainSettings:
    """Mode flags, loss weights, and optimizer hyperparameters."""

    mode: str = "eda"  # "eda" (dense-map classifier) or "object_align" (coupled baseline)
    loss_weights: tuple[float, float, float] = (1.0, 2.0, 1.0)  # (w_box, w_cls, w_g)
    box_loss_weights: tuple[float, float, float] = (1.0, 5.0, 2.0)
    match_costs: tuple[float, float, float] = (2.0, 5.0, 2.0)
    lr: float = 2e-4
    weight_decay: float = 1e-4
    lr_drop_at: float | None = 0.75  # fraction of total steps; lr then falls 10x
    aux_box_losses: bool = True  # deep supervision of every decoder layer
    extend_box_supervision: bool = False
    extension_min_objectness: float = 0.9
    extension_max_iou: float = 0.3

    def __post_init__(self) -> None:
        if self.mode not in ("eda", "object_align"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class TrainState:
    """Everything that evolves or is referenced during training."""

    model: OpenVocabDetector
    image_encoder: FrozenImageEncoder
    emb_train: EmbeddingMatrix
    scoring: DenseScoringConfig
    settings: TrainSettings
    optimizer: torch.optim.Optimizer
    frozen: FrozenContext
    step: int = 0


def make_train_state(model: OpenVocabDetector, image_encoder: FrozenImageEncoder,
                     emb_train: EmbeddingMatrix, scoring: DenseScoringConfig,
                     settings: TrainSettings) -> TrainState:
    optimizer = torch.optim.AdamW(model.parameters(), lr=settings.lr,
                                  weight_decay=settings.weight_decay)
    return TrainState(model=model, image_encoder=image_encoder, emb_train=emb_train,
                      scoring=scoring, settings=settings, optimizer=optimizer,
                      frozen=FrozenContext(image_encoder))


def _targets_from_sample(sample: ImageSample, base_names: Sequence[str],
                         ) -> tuple[Tensor, list[int | None]]:
    boxes = []
    labels: list[int | None] = []
    for ann in sample.annotations:
        x1, y1, x2, y2 = ann.box
        boxes.append(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1))
        labels.append(base_names.index(ann.category))
    if not boxes:
        return torch.zeros((0, 4)), labels
    return torch.tensor(boxes, dtype=torch.get_default_dtype()), labels


def _extend_targets(boxes: Tensor, objectness: Tensor, targets: Tensor,
                    labels: list[int | None], settings: TrainSettings,
                    ) -> tuple[Tensor, list[int | None]]:
    """Add confident, non-overlapping proposals as box-only targets."""
    with torch.no_grad():
        confident = objectness > settings.extension_min_objectness
        if targets.shape[0]:
            overlap = pairwise_iou(box_cxcywh_to_xyxy(boxes),
                                   box_cxcywh_to_xyxy(targets)).max(dim=1).values
            confident &= overlap < settings.extension_max_iou
        extra = boxes[confident].detach()
    if not extra.shape[0]:
        return targets, labels
    return torch.cat([targets, extra]), labels + [None] * int(extra.shape[0])


def _fused_map_for_sample(state: TrainState, sample: ImageSample, grid: PatchGrid,
                          emb: EmbeddingMatrix) -> DenseScoreMap:
    s_det = detector_dense_probs(grid, emb, state.scoring.tau)
    if state.scoring.lam == 0.0:
        return fuse_score_maps(s_det, s_det, 0.0)
    clip_grid, _ = state.frozen.get(sample)
    s_clip = detector_dense_probs(clip_grid, emb, state.scoring.tau)
    return fuse_score_maps(s_det, s_clip, state.scoring.lam)


def train_step(batch: Sequence[ImageSample], state: TrainState) -> LossBundle:
    """One optimizer step on the weighted total loss over a batch.

    Deterministic given the model state and batch. Raises
    :class:`NumericError` with per-term diagnostics if the loss goes
    non-finite. When a loss weight is zero its term is skipped and reported
    as 0.
    """
    if not batch:
        raise ValueError("batch is empty")
    settings = state.settings
    w_box, w_cls, w_g = settings.loss_weights
    state.model.train()

    images = torch.from_numpy(
        np.stack([s.pixels.astype(np.float32) for s in batch])).permute(0, 3, 1, 2)
    out = state.model(images)
    base_names = list(state.emb_train.category_names)

    box_terms, cls_terms, global_terms = [], [], []
    for i, sample in enumerate(batch):
        boxes_i = out.proposals.boxes[i]
        obj_i = out.proposals.objectness[i]
        targets, labels = _targets_from_sample(sample, base_names)
        if settings.extend_box_supervision:
            targets, labels = _extend_targets(boxes_i, obj_i, targets, labels, settings)
        match = bipartite_match((boxes_i.detach(), obj_i.detach()), targets,
                                settings.match_costs)
        if settings.aux_box_losses:
            layer_terms = []
            for layer in range(out.proposals.layer_boxes.shape[0]):
                lb = out.proposals.layer_boxes[layer, i]
                lo = out.proposals.layer_objectness[layer, i]
                lmatch = match if layer == out.proposals.layer_boxes.shape[0] - 1 else \
                    bipartite_match((lb.detach(), lo.detach()), targets,
                                    settings.match_costs)
                layer_terms.append(box_loss((lb, lo), targets, lmatch,
                                            settings.box_loss_weights).total)
            box_terms.append(torch.stack(layer_terms).mean())
        else:
            box_terms.append(box_loss((boxes_i, obj_i), targets, match,
                                      settings.box_loss_weights).total)

        if w_cls > 0 and match.pairs:
            if settings.mode == "eda":
                grid = state.model.dense_grid(out, i)
                fused = _fused_map_for_sample(state, sample, grid, state.emb_train)
                xyxy = clamp_boxes_unit(box_cxcywh_to_xyxy(boxes_i.detach()))
                rois = roi_align_many(fused, xyxy, state.scoring.roi_size)
                scores = topk_masked_mean_many(rois, state.scoring.k)
                cls_terms.append(classification_loss(scores, match, labels))
            else:
                _, cls_states = split_branches(out.proposals.states, state.model.decoder_cfg)
                embeds = state.model.object_align_head(cls_states[i])
                cls_terms.append(object_level_baseline_loss(
                    embeds, state.emb_train, match, labels, state.scoring.tau))

        if w_g > 0:
            _, cls_token = state.frozen.get(sample)
            global_terms.append(
                global_alignment_from_token(state.model.dense_grid(out, i), cls_token))

    l_box = torch.stack(box_terms).mean()
    l_cls = torch.stack(cls_terms).mean() if cls_terms else l_box * 0.0
    l_g = torch.stack(global_terms).mean() if global_terms else l_box * 0.0
    total = w_box * l_box + w_cls * l_cls + w_g * l_g

    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss at step {state.step}: box={float(l_box)} "
            f"cls={float(l_cls)} global={float(l_g)}")

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    return LossBundle(l_box=float(l_box.detach()), l_cls=float(l_cls.detach()),
                      l_g=float(l_g.detach()), weights=(w_box, w_cls, w_g))


def fit(state: TrainState, samples: Sequence[ImageSample], steps: int, batch_size: int,
        seed: int, augment: bool = False,
        log_fn: Callable[[int, LossBundle, float], None] | None = None) -> list[LossBundle]:
    """Run ``steps`` training steps over seeded shuffled batches."""
    bundles = []
    drop_at = None
    if state.settings.lr_drop_at is not None:
        drop_at = max(1, int(steps * state.settings.lr_drop_at))
    stream = batch_iterator(samples, batch_size, seed=seed, augment=augment, epochs=None)
    for local_step in range(steps):
        if drop_at is not None and local_step == drop_at:
            for group in state.optimizer.param_groups:
                group["lr"] *= 0.1
        bundle = train_step(next(stream), state)
        bundles.append(bundle)
        if log_fn is not None:
            log_fn(state.step, bundle, state.optimizer.param_groups[0]["lr"])
    return bundles


# ---------------------------------------------------------------------------
# inference


def _sample_from_image(image) -> ImageSample:
    if isinstance(image, ImageSample):
        return image
    return ImageSample(image_id=-1, pixels=np.asarray(image, dtype=np.float32),
                       annotations=[], cache_key=("adhoc", id(image)))


def proposal_category_scores(state: TrainState, sample: ImageSample,
                             target_emb: EmbeddingMatrix,
                             ) -> tuple[list[Proposal], list[ProposalScores]]:
    """Proposals plus their per-category scores under the configured mode."""
    state.model.eval()
    with torch.no_grad():
        images = torch.from_numpy(sample.pixels.astype(np.float32))[None].permute(0, 3, 1, 2)
        out = state.model(images)
        proposals = proposals_from_tensors(out.proposals.boxes[0], out.proposals.objectness[0])
        if state.settings.mode == "eda":
            grid = state.model.dense_grid(out, 0)
            fused = _fused_map_for_sample(state, sample, grid, target_emb)
            return proposals, classify_proposals(fused, proposals, state.scoring)
        _, cls_states = split_branches(out.proposals.states, state.model.decoder_cfg)
        embeds = state.model.object_align_head(cls_states[0])
        rows = torch.as_tensor(target_emb.rows, dtype=embeds.dtype)
        cos = F.normalize(embeds, dim=1, eps=1e-12) @ rows.T
        probs = torch.softmax(cos / state.scoring.tau, dim=1)
        scored = []
        names = tuple(target_emb.category_names)
        for q, prop in enumerate(proposals):
            idx = int(torch.argmax(probs[q]))
            scored.append(ProposalScores(
                proposal=prop, scores=probs[q], category_names=names, label=names[idx],
                confidence=float(probs[q, idx]) * prop.objectness))
        return proposals, scored


def category_nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-category suppression of lower-scored overlapping boxes."""
    keep: list[Detection] = []
    for det in sorted(detections, key=lambda d: -d.score):
        ious = [float(pairwise_iou(torch.tensor([det.box], dtype=torch.float64),
                                   torch.tensor([k.box], dtype=torch.float64))[0, 0])
                for k in keep if k.category == det.category]
        if all(v < iou_threshold for v in ious):
            keep.append(det)
    return keep


def infer_detections(image, state: TrainState, target_emb: EmbeddingMatrix,
                     score_threshold: float = 0.05, max_detections: int = 100,
                     nms_iou: float | None = None) -> list[Detection]:
    """Detect over the target vocabulary: propose, score densely, rank.

    Results are sorted by confidence (ties keep query order), thresholded,
    and capped. Boxes are clamped to the image. ``nms_iou`` optionally
    deduplicates same-category boxes above that overlap.
    """
    sample = _sample_from_image(image)
    _, scored = proposal_category_scores(state, sample, target_emb)
    detections = []
    for ps in scored:
        if ps.confidence < score_threshold:
            continue
        x1, y1, x2, y2 = ps.proposal.box_xyxy
        box = (max(x1, 0.0), max(y1, 0.0), min(x2, 1.0), min(y2, 1.0))
        detections.append(Detection(category=ps.label, score=ps.confidence, box=box))
    detections.sort(key=lambda d: -d.score)
    if nms_iou is not None:
        detections = category_nms(detections, nms_iou)
    return detections[:max_detections]


def run_evaluation(state: TrainState, samples: Sequence[ImageSample],
                   target_emb: EmbeddingMatrix, vocab, ar_top_n: int = 100,
                   score_threshold: float = 0.05, max_detections: int = 100,
                   nms_iou: float | None = None):
    """Detect over an evaluation split and aggregate AP/AR into a report."""
    from . import metrics

    detections_by_image = {}
    proposals_by_image = {}
    gt_by_image = {}
    image_sizes = {}
    for sample in samples:
        proposals, scored = proposal_category_scores(state, sample, target_emb)
        dets = []
        for ps in scored:
            if ps.confidence < score_threshold:
                continue
            x1, y1, x2, y2 = ps.proposal.box_xyxy
            dets.append(Detection(category=ps.label, score=ps.confidence,
                                  box=(max(x1, 0.0), max(y1, 0.0),
                                       min(x2, 1.0), min(y2, 1.0))))
        dets.sort(key=lambda d: -d.score)
        if nms_iou is not None:
            dets = category_nms(dets, nms_iou)
        detections_by_image[sample.image_id] = dets[:max_detections]
        proposals_by_image[sample.image_id] = proposals
        gt_by_image[sample.image_id] = sample.annotations
        image_sizes[sample.image_id] = sample.size

    per_category, means = metrics.ap50_generalized(
        detections_by_image, gt_by_image, vocab,
        restrict_to=target_emb.category_names)
    ar = metrics.average_recall_topn(proposals_by_image, gt_by_image, ar_top_n, image_sizes)
    return metrics.build_report(per_category, means, ar, ar_top_n)


# ---------------------------------------------------------------------------
# checkpoint format

_CKPT_MAGIC = "DENSEALIGN-CKPT"
_CKPT_VERSION = "v1"


def save_checkpoint(path: str | Path, model: torch.nn.Module, meta: dict | None = None,
                    ) -> None:
    """Write named parameter arrays as one blob with a JSON manifest header."""
    tensors = []
    payload = bytearray()
    for name, value in model.state_dict().items():
        array = value.detach().cpu().numpy()
        array = np.ascontiguousarray(array.astype(array.dtype.newbyteorder("<")))
        tensors.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.str})
        payload.extend(array.tobytes())
    manifest = {"format": f"{_CKPT_MAGIC} {_CKPT_VERSION}", "meta": meta or {},
                "tensors": tensors}
    header = json.dumps(manifest, sort_keys=True) + "\n"
    Path(path).write_bytes(header.encode("utf-8") + bytes(payload))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint blob back into named arrays plus its metadata."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    nl = blob.find(b"\n")
    if nl < 0:
        raise LoadError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("format") != f"{_CKPT_MAGIC} {_CKPT_VERSION}":
        raise LoadError(f"{path}: unexpected format {manifest.get('format')!r}")

    arrays: dict[str, np.ndarray] = {}
    offset = nl + 1
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise LoadError(f"{path}: payload truncated at tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(
            entry["shape"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise LoadError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return arrays, manifest.get("meta", {})


def restore_model(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    """Load checkpoint arrays into a model; shapes and names must match."""
    tensors = {name: torch.from_numpy(np.ascontiguousarray(arr))
               for name, arr in arrays.items()}
    model.load_state_dict(tensors)
