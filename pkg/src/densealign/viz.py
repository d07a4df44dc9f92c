"""Rendering helpers: detection overlays and feature-space cluster maps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import PatchGrid

_BOX_COLORS = [(230, 60, 60), (60, 160, 60), (60, 90, 220), (220, 180, 40),
               (170, 60, 200), (60, 190, 190)]


def draw_detections(pixels: np.ndarray, detections: Sequence, path: str | Path | None = None,
                    ) -> np.ndarray:
    """Draw labeled boxes on an image; returns (and optionally saves) uint8 RGB."""
    from PIL import Image, ImageDraw

    img = Image.fromarray(np.clip(pixels * 255.0, 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(img)
    height, width = pixels.shape[:2]
    for i, det in enumerate(detections):
        x1, y1, x2, y2 = det.box
        color = _BOX_COLORS[i % len(_BOX_COLORS)]
        draw.rectangle([x1 * width, y1 * height, x2 * width, y2 * height],
                       outline=color, width=1)
        draw.text((x1 * width + 1, max(y1 * height - 9, 0)),
                  f"{det.category} {det.score:.2f}", fill=color)
    if path is not None:
        img.save(path)
    return np.asarray(img)


def kmeans_label_map(grid: PatchGrid, k: int, seed: int = 0) -> np.ndarray:
    """Cluster per-location feature vectors into k groups.

    Seeded k-means++ with 10 restarts (lowest inertia kept) and at most 100
    iterations. Returns an (h, w) int label map.
    """
    from sklearn.cluster import KMeans

    h, w, _ = grid.shape
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > h * w:
        raise ValueError(f"k = {k} exceeds the {h * w} grid locations")
    feats = grid.values.detach().cpu().numpy().reshape(h * w, -1).astype(np.float64)
    km = KMeans(n_clusters=k, init="k-means++", n_init=10, max_iter=100, random_state=seed)
    labels = km.fit_predict(feats)
    return labels.reshape(h, w).astype(np.int32)


def save_label_map_png(labels: np.ndarray, path: str | Path, scale: int = 1) -> None:
    """Write an indexed-color PNG of an integer label map, optionally upscaled."""
    from PIL import Image

    if labels.max() > 255:
        raise ValueError("label map has more than 256 classes")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    rng = np.random.default_rng(12345)
    palette = rng.integers(30, 255, size=(256, 3), dtype=np.uint8)
    img.putpalette(palette.flatten().tolist())
    if scale > 1:
        img = img.resize((labels.shape[1] * scale, labels.shape[0] * scale),
                         resample=Image.NEAREST)
    img.save(path)
