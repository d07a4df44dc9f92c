"""Command-line surface: embed, train, eval, infer, visualize, cluster.

Every subcommand takes ``--config`` (JSON, validated against the schema)
plus any number of dotted-path overrides, either ``--set key=value`` or
``--key value``. Exit codes: 0 success, 2 config error, 3 numeric failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import runtime, viz
from .config import RunConfig, load_run_config
from .datasets import ImageSample
from .exceptions import ConfigError, LoadError, NumericError
from .metrics import EvalReport, format_report_table
from .objectives import infer_detections, save_checkpoint
from .scoring import detector_dense_probs, export_semantic_maps
from .vocab import ensemble_prompt_embeddings, save_embeddings

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _parse_overrides(pairs: list[str], extras: list[str]) -> list[tuple[str, str]]:
    overrides = []
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides.append((key, value))
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognized argument {token!r}")
        if "=" in token:
            key, _, value = token[2:].partition("=")
            overrides.append((key, value))
            i += 1
        else:
            if i + 1 >= len(extras):
                raise ConfigError(f"override {token!r} is missing a value")
            overrides.append((token[2:], extras[i + 1]))
            i += 2
    return overrides


def _load_image(path: str | Path, cfg: RunConfig, image_id: int = 0) -> ImageSample:
    from PIL import Image

    size = int(cfg.section("data")["image_size"])
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((size, size), Image.BILINEAR)
            pixels = np.asarray(img, dtype=np.float32) / 255.0
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc
    return ImageSample(image_id=image_id, pixels=pixels, annotations=[],
                       cache_key=("cli", str(path)))


def _prepare_output(cfg: RunConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.echo_json() + "\n", encoding="utf-8")
    return out


def cmd_embed(cfg: RunConfig, subset: str, out_path: Path | None) -> int:
    vocab = runtime.build_vocab(cfg)
    text_encoder, _ = runtime.build_encoders(cfg)
    matrix = ensemble_prompt_embeddings(vocab, text_encoder, subset)
    out = out_path or (_prepare_output(cfg) / f"embeddings_{subset}.emb")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(matrix, out)
    print(f"wrote {len(matrix)} x {matrix.dim} embedding matrix to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _prepare_output(cfg)
    state, _ = runtime.train_run(cfg, log_path=out / "train_log.jsonl")
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(ckpt, state.model,
                    meta={"seed": cfg.seed, "steps": state.step,
                          "mode": state.settings.mode})
    print(f"trained {state.step} steps; checkpoint at {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: Path, subset: str) -> int:
    out = _prepare_output(cfg)
    state = runtime.state_from_checkpoint(cfg, checkpoint)
    report: EvalReport = runtime.eval_run(cfg, state, subset=subset)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    table = format_report_table(report)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_infer(cfg: RunConfig, checkpoint: Path, image_path: Path, image_id: int,
              annotate: bool) -> int:
    out = _prepare_output(cfg)
    state = runtime.state_from_checkpoint(cfg, checkpoint)
    vocab = runtime.build_vocab(cfg)
    target_emb = runtime.build_embeddings(cfg, vocab, "target")
    sample = _load_image(image_path, cfg, image_id)
    infer_cfg = cfg.section("infer")
    nms = infer_cfg["nms_iou"]
    detections = infer_detections(sample, state, target_emb,
                                  score_threshold=float(infer_cfg["score_threshold"]),
                                  max_detections=int(infer_cfg["max_detections"]),
                                  nms_iou=None if nms is None else float(nms))
    height, width = sample.size
    det_path = out / "detections.jsonl"
    with det_path.open("w", encoding="utf-8") as fh:
        for det in detections:
            x1, y1, x2, y2 = det.box
            fh.write(json.dumps({
                "image_id": image_id,
                "box": [round(x1 * width, 2), round(y1 * height, 2),
                        round((x2 - x1) * width, 2), round((y2 - y1) * height, 2)],
                "category": det.category,
                "score": round(det.score, 6),
            }) + "\n")
    if annotate:
        viz.draw_detections(sample.pixels, detections, out / "detections.png")
    print(f"{len(detections)} detections -> {det_path}")
    return EXIT_OK


def cmd_visualize(cfg: RunConfig, checkpoint: Path, image_path: Path,
                  categories: list[str] | None) -> int:
    out = _prepare_output(cfg)
    state = runtime.state_from_checkpoint(cfg, checkpoint)
    vocab = runtime.build_vocab(cfg)
    target_emb = runtime.build_embeddings(cfg, vocab, "target")
    sample = _load_image(image_path, cfg)

    grid = runtime.detector_feature_grid(state, sample)
    dense = detector_dense_probs(grid, target_emb, state.scoring.tau)
    written = export_semantic_maps(dense, out, categories)

    infer_cfg = cfg.section("infer")
    detections = infer_detections(sample, state, target_emb,
                                  score_threshold=float(infer_cfg["score_threshold"]),
                                  max_detections=int(infer_cfg["max_detections"]))
    overlay = out / "detections.png"
    viz.draw_detections(sample.pixels, detections, overlay)
    print(f"wrote {len(written)} map images and {overlay}")
    return EXIT_OK


def cmd_cluster(cfg: RunConfig, checkpoint: Path, image_path: Path, k: int) -> int:
    out = _prepare_output(cfg)
    state = runtime.state_from_checkpoint(cfg, checkpoint)
    sample = _load_image(image_path, cfg)
    grid = runtime.detector_feature_grid(state, sample)
    labels = viz.kmeans_label_map(grid, k, seed=cfg.seed)
    path = out / f"clusters_k{k}.png"
    viz.save_label_map_png(labels, path, scale=grid.stride)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densealign",
        description="Open-vocabulary detection via dense alignment to text embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="run config JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path")

    p = sub.add_parser("embed", help="write the text-embedding classifier file")
    common(p)
    p.add_argument("--subset", default="target", choices=["base", "novel", "target"])
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("train", help="train a detector per the config")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--subset", default="target", choices=["base", "novel", "target"])

    p = sub.add_parser("infer", help="detect objects in one image")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--image-id", type=int, default=0)
    p.add_argument("--annotate", action="store_true")

    p = sub.add_parser("visualize", help="export per-category heatmaps and an overlay")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--categories", default=None,
                   help="comma-separated category names (default: all)")

    p = sub.add_parser("cluster", help="k-means cluster the dense features of one image")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--k", type=int, required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(args.set, extras)
        cfg = load_run_config(args.config, overrides)
        torch.manual_seed(cfg.seed)
        if args.command == "embed":
            return cmd_embed(cfg, args.subset, args.out)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.subset)
        if args.command == "infer":
            return cmd_infer(cfg, args.checkpoint, args.image, args.image_id, args.annotate)
        if args.command == "visualize":
            cats = args.categories.split(",") if args.categories else None
            return cmd_visualize(cfg, args.checkpoint, args.image, cats)
        if args.command == "cluster":
            return cmd_cluster(cfg, args.checkpoint, args.image, args.k)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LoadError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
