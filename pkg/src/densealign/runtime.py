"""Assembly of full runs from a RunConfig: encoders, data, model, train, eval.

Shared by the command-line interface and by end-to-end tests, so a toy
experiment is a handful of calls: build the pieces, ``train_run``, then
``eval_run`` with whichever vocabulary subset inference should see.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .datasets import ImageSample, load_coco_annotations, synth_shapes
from .encoders import FrozenImageEncoder, TextEncoder, build_encoder_pair
from .exceptions import ConfigError
from .metrics import EvalReport
from .model import OpenVocabDetector, build_detector
from .objectives import (FrozenContext, LossBundle, TrainState, fit, make_train_state,
                         run_evaluation, save_checkpoint, load_checkpoint, restore_model)
from .vocab import (CategoryVocabulary, EmbeddingMatrix, ensemble_prompt_embeddings,
                    build_vocabulary, select_rows)


def build_encoders(cfg: RunConfig) -> tuple[TextEncoder, FrozenImageEncoder]:
    return build_encoder_pair(cfg.section("encoder"))


def build_vocab(cfg: RunConfig) -> CategoryVocabulary:
    vocab_cfg = cfg.section("vocab")
    if vocab_cfg["file"] is not None:
        return build_vocabulary(vocab_cfg["file"])
    data = cfg.section("data")
    if data["kind"] != "synthetic":
        raise ConfigError("non-synthetic runs need vocab.file")
    cats = [(name, "base") for name in data["base_categories"]]
    cats += [(name, "novel") for name in data["novel_categories"]]
    return CategoryVocabulary(categories=tuple(cats),
                              prompt_templates=tuple(vocab_cfg["templates"]))


def build_embeddings(cfg: RunConfig, vocab: CategoryVocabulary, subset: str,
                     text_encoder: TextEncoder | None = None) -> EmbeddingMatrix:
    if text_encoder is None:
        text_encoder, _ = build_encoders(cfg)
    return ensemble_prompt_embeddings(vocab, text_encoder, subset)


@dataclass
class DataBundle:
    train: list[ImageSample]
    eval: list[ImageSample]


def build_data(cfg: RunConfig, vocab: CategoryVocabulary) -> DataBundle:
    data = cfg.section("data")
    if data["kind"] == "synthetic":
        shapes = synth_shapes(seed=int(data["seed"]), n_images=int(data["n_images"]),
                              image_size=int(data["image_size"]),
                              base_cats=data["base_categories"],
                              novel_cats=data["novel_categories"],
                              n_eval=int(data["n_eval"]),
                              min_objects=int(data["min_objects"]),
                              max_objects=int(data["max_objects"]))
        return DataBundle(train=shapes.train, eval=shapes.eval)

    train_ds = load_coco_annotations(data["annotations"], vocab, "train_base_only",
                                     image_root=data["image_root"],
                                     image_size=data["image_size"])
    eval_path = data["eval_annotations"] or data["annotations"]
    eval_ds = load_coco_annotations(eval_path, vocab, "eval_all",
                                    image_root=data["image_root"],
                                    image_size=data["image_size"])
    return DataBundle(train=[train_ds.load(i) for i in range(len(train_ds))],
                      eval=[eval_ds.load(i) for i in range(len(eval_ds))])


def build_state(cfg: RunConfig, emb_train: EmbeddingMatrix,
                image_encoder: FrozenImageEncoder,
                frozen: FrozenContext | None = None) -> TrainState:
    """Seeded model + optimizer + frozen-encoder cache, ready to train."""
    model = build_detector(embed_dim=emb_train.dim, decoder_cfg=cfg.decoder_config(),
                           fuse_levels=cfg.scoring_config().fuse_levels,
                           proposal_level=int(cfg.section("model")["proposal_level"]),
                           seed=cfg.seed)
    state = make_train_state(model, image_encoder, emb_train, cfg.scoring_config(),
                             cfg.train_settings())
    if frozen is not None:
        state.frozen = frozen
    return state


def train_run(cfg: RunConfig, log_path: Path | None = None,
              state: TrainState | None = None,
              samples: Sequence[ImageSample] | None = None) -> tuple[TrainState, list[LossBundle]]:
    """Train per config; optionally reuse a prebuilt state or sample list."""
    vocab = build_vocab(cfg)
    text_encoder, image_encoder = build_encoders(cfg)
    if state is None:
        emb_train = ensemble_prompt_embeddings(vocab, text_encoder, "base")
        state = build_state(cfg, emb_train, image_encoder)
    if samples is None:
        samples = build_data(cfg, vocab).train

    train_cfg = cfg.section("train")
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        def log_fn(step: int, bundle: LossBundle, lr: float) -> None:
            if log_fh is not None and step % int(train_cfg["log_every"]) == 0:
                log_fh.write(json.dumps(
                    {"step": step, "l_box": bundle.l_box, "l_cls": bundle.l_cls,
                     "l_g": bundle.l_g, "total": bundle.total, "lr": lr},
                    sort_keys=True) + "\n")

        torch.manual_seed(cfg.seed)
        bundles = fit(state, samples, steps=int(train_cfg["steps"]),
                      batch_size=int(train_cfg["batch_size"]), seed=cfg.seed,
                      augment=bool(train_cfg["augment"]), log_fn=log_fn)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state, bundles


def eval_run(cfg: RunConfig, state: TrainState, subset: str = "target",
             samples: Sequence[ImageSample] | None = None) -> EvalReport:
    """Evaluate a trained state over the configured eval split."""
    vocab = build_vocab(cfg)
    text_encoder, _ = build_encoders(cfg)
    target_emb = ensemble_prompt_embeddings(vocab, text_encoder, subset)
    if samples is None:
        samples = build_data(cfg, vocab).eval
    infer_cfg = cfg.section("infer")
    nms = infer_cfg["nms_iou"]
    return run_evaluation(state, samples, target_emb, vocab,
                          ar_top_n=int(infer_cfg["ar_top_n"]),
                          score_threshold=float(infer_cfg["score_threshold"]),
                          max_detections=int(infer_cfg["max_detections"]),
                          nms_iou=None if nms is None else float(nms))


def detector_feature_grid(state: TrainState, sample: ImageSample):
    """The trained model's fused dense feature grid for one image."""
    state.model.eval()
    with torch.no_grad():
        images = torch.from_numpy(
            sample.pixels.astype(np.float32))[None].permute(0, 3, 1, 2)
        out = state.model(images)
        return state.model.dense_grid(out, 0)


def state_from_checkpoint(cfg: RunConfig, checkpoint_path: str | Path) -> TrainState:
    """Rebuild a TrainState and load parameters from a checkpoint file."""
    vocab = build_vocab(cfg)
    text_encoder, image_encoder = build_encoders(cfg)
    emb_train = ensemble_prompt_embeddings(vocab, text_encoder, "base")
    state = build_state(cfg, emb_train, image_encoder)
    arrays, _meta = load_checkpoint(checkpoint_path)
    restore_model(state.model, arrays)
    return state
