"""Shared desk-scale run configuration for end-to-end tests."""

from __future__ import annotations

import json

from densealign.config import RunConfig, load_run_config

# Small enough to train in seconds, big enough to learn the shapes world.
TOY_OVERRIDES: dict[str, object] = {
    "encoder.dim": 32,
    "scoring.tau": 0.05,
    "scoring.lam": 0.25,
    "scoring.roi_size": [7, 7],
    "scoring.k": 37,  # ~3/4 of the 49-cell RoI
    "scoring.fuse_levels": [3, 4],
    "decoder.num_queries": 12,
    "decoder.num_layers": 3,
    "decoder.split_layer": 1,
    "decoder.hidden_dim": 48,
    "decoder.num_heads": 4,
    "decoder.num_encoder_layers": 1,
    "data.image_size": 64,
    "data.n_images": 12,
    "data.n_eval": 6,
    "data.max_objects": 2,
    "train.steps": 10,
    "train.batch_size": 4,
}


def toy_cfg(**extra) -> RunConfig:
    """Build a RunConfig from the toy defaults plus dotted-path overrides."""
    merged = dict(TOY_OVERRIDES)
    merged.update(extra)
    pairs = [(key, json.dumps(value)) for key, value in merged.items()]
    return load_run_config(None, overrides=pairs)
