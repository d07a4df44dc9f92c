"""Run configuration: schema, file loading, and dotted-path overrides.

A run config is a nested JSON document validated against the schema below;
unknown keys are rejected so typos fail fast. Command-line overrides use
dotted paths (``scoring.lam=0.25``) and JSON-parsed values.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .datasets import DEFAULT_BASE_CATEGORIES, DEFAULT_NOVEL_CATEGORIES
from .exceptions import ConfigError
from .proposals import DecoderConfig
from .objectives import TrainSettings
from .scoring import DenseScoringConfig

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "encoder": {
        "kind": "stub",
        "dim": 32,
        "seed": 0,
        "stride": 8,
        "noise": 0.08,
        "identity_projections": False,
        "include_cls_in_masked_pass": False,
        "factory": None,   # external adapters: "module:callable"
        "weights": None,   # external adapters: checkpoint path
    },
    "scoring": {
        "tau": 0.01,
        "lam": 0.25,
        "roi_size": [14, 14],
        "k": 144,
        "fuse_levels": [2, 3],
    },
    "decoder": {
        "num_queries": 100,
        "num_layers": 6,
        "split_layer": 2,
        "hidden_dim": 128,
        "num_heads": 8,
        "num_encoder_layers": 1,
    },
    "model": {
        "proposal_level": 3,
    },
    "data": {
        "kind": "synthetic",  # "synthetic" or "coco"
        "image_size": 64,
        "seed": 0,
        "n_images": 160,
        "n_eval": 60,
        "min_objects": 1,
        "max_objects": 3,
        "base_categories": list(DEFAULT_BASE_CATEGORIES),
        "novel_categories": list(DEFAULT_NOVEL_CATEGORIES),
        "annotations": None,       # coco: training annotation JSON
        "eval_annotations": None,  # coco: evaluation annotation JSON
        "image_root": None,        # coco: image directory
    },
    "vocab": {
        "file": None,  # vocabulary JSON; synthetic runs can derive it from data
        "templates": ["a photo of a {}."],
    },
    "train": {
        "steps": 2000,
        "batch_size": 8,
        "lr": 2e-4,
        "weight_decay": 1e-4,
        "lr_drop_at": 0.75,
        "mode": "eda",
        "aux_box_losses": True,
        "loss_weights": [1.0, 2.0, 1.0],
        "box_loss_weights": [1.0, 5.0, 2.0],
        "match_costs": [2.0, 5.0, 2.0],
        "augment": False,
        "extend_box_supervision": False,
        "extension_min_objectness": 0.9,
        "extension_max_iou": 0.3,
        "log_every": 1,
    },
    "infer": {
        "score_threshold": 0.05,
        "max_detections": 100,
        "ar_top_n": 100,
        "objectness_weight": True,
        "nms_iou": None,
    },
}


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, here)
        else:
            base[key] = value


def _apply_override(config: dict, dotted: str, raw_value: str) -> None:
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node[leaf] = value


@dataclass
class RunConfig:
    """Validated run configuration with typed accessors."""

    raw: dict[str, Any]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def section(self, name: str) -> dict:
        return self.raw[name]

    def scoring_config(self) -> DenseScoringConfig:
        s = self.raw["scoring"]
        try:
            return DenseScoringConfig(tau=float(s["tau"]), lam=float(s["lam"]),
                                      roi_size=tuple(s["roi_size"]), k=int(s["k"]),
                                      fuse_levels=tuple(s["fuse_levels"]))
        except ValueError as exc:
            raise ConfigError(f"bad scoring section: {exc}") from exc

    def decoder_config(self) -> DecoderConfig:
        d = self.raw["decoder"]
        try:
            return DecoderConfig(num_queries=int(d["num_queries"]),
                                 num_layers=int(d["num_layers"]),
                                 split_layer=int(d["split_layer"]),
                                 hidden_dim=int(d["hidden_dim"]),
                                 num_heads=int(d["num_heads"]),
                                 num_encoder_layers=int(d["num_encoder_layers"]))
        except ValueError as exc:
            raise ConfigError(f"bad decoder section: {exc}") from exc

    def train_settings(self) -> TrainSettings:
        t = self.raw["train"]
        try:
            return TrainSettings(mode=t["mode"],
                                 loss_weights=tuple(float(v) for v in t["loss_weights"]),
                                 box_loss_weights=tuple(float(v) for v in t["box_loss_weights"]),
                                 match_costs=tuple(float(v) for v in t["match_costs"]),
                                 lr=float(t["lr"]), weight_decay=float(t["weight_decay"]),
                                 lr_drop_at=None if t["lr_drop_at"] is None
                                 else float(t["lr_drop_at"]),
                                 aux_box_losses=bool(t["aux_box_losses"]),
                                 extend_box_supervision=bool(t["extend_box_supervision"]),
                                 extension_min_objectness=float(t["extension_min_objectness"]),
                                 extension_max_iou=float(t["extension_max_iou"]))
        except ValueError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc

    def echo_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _check_paths(config: dict) -> None:
    data = config["data"]
    if data["kind"] not in ("synthetic", "coco"):
        raise ConfigError(f"unknown data.kind {data['kind']!r}")
    required: list[tuple[str, Any]] = []
    if data["kind"] == "coco":
        required.append(("data.annotations", data["annotations"]))
        if config["vocab"]["file"] is None:
            raise ConfigError("coco runs need vocab.file")
    if config["vocab"]["file"] is not None:
        required.append(("vocab.file", config["vocab"]["file"]))
    for key in ("eval_annotations", "image_root"):
        if data["kind"] == "coco" and data[key] is not None:
            required.append((f"data.{key}", data[key]))
    for name, value in required:
        if value is None:
            raise ConfigError(f"{name} must be set")
        if not Path(value).exists():
            raise ConfigError(f"{name} path does not exist: {value}")


def load_run_config(path: str | Path | None = None,
                    overrides: list[tuple[str, str]] | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, and overrides."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        _merge(config, file_cfg)
    for dotted, raw_value in overrides or []:
        _apply_override(config, dotted, raw_value)
    _check_paths(config)
    return RunConfig(raw=config)
