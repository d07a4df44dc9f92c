"""Shared definitions for the synthetic color/shape world.

The toy datasets render solid colored shapes on a neutral canvas, and the
stub image encoder recovers (color, shape) attributes from pixels. Both
sides import the palette and the shape geometry from here, which is what
puts rendered images and attribute phrases like "red circle" in a shared
semantic space.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

COLOR_RGB: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.12, 0.65, 0.18),
    "blue": (0.15, 0.25, 0.80),
    "yellow": (0.88, 0.82, 0.12),
}
SHAPE_NAMES = ("circle", "square", "triangle")
BACKGROUND_RGB = (0.94, 0.94, 0.92)

# Any pixel further than this (euclidean RGB) from every palette color is
# treated as background by the analyzer.
_COLOR_TOLERANCE = 0.20
# Components smaller than this are rasterization debris, not objects.
_MIN_COMPONENT_AREA = 16

# A shape's fill ratio is its pixel area over its bounding-box area:
# squares sit at 1.0, circles near pi/4, triangles near 1/2.
_SQUARE_MIN_FILL = 0.90
_CIRCLE_MIN_FILL = 0.64


def parse_category(name: str) -> tuple[str, str]:
    """Split an attribute-pair category like ``"red circle"`` into (color, shape)."""
    parts = name.split()
    if len(parts) != 2 or parts[0] not in COLOR_RGB or parts[1] not in SHAPE_NAMES:
        raise ValueError(
            f"category {name!r} is not renderable; expected '<color> <shape>' with "
            f"color in {sorted(COLOR_RGB)} and shape in {list(SHAPE_NAMES)}")
    return parts[0], parts[1]


def shape_mask(shape: str, height: int, width: int, cx: float, cy: float, size: float,
               ) -> np.ndarray:
    """Rasterize one shape as a boolean mask over an image of the given size.

    ``size`` is the full extent (diameter / side / base width) in pixels;
    ``cx, cy`` the center in pixel coordinates. Pixel centers at (col + 0.5,
    row + 0.5) are tested against the analytic shape.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    half = size / 2.0
    if shape == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half ** 2
    if shape == "square":
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    if shape == "triangle":
        # isoceles, apex up: vertices (cx, cy-half), (cx-half, cy+half), (cx+half, cy+half)
        inside_base = py <= cy + half
        # left edge from apex to bottom-left, right edge mirrored
        t = (py - (cy - half)) / size  # 0 at apex, 1 at base
        return inside_base & (t >= 0) & (np.abs(px - cx) <= t * half)
    raise ValueError(f"unknown shape {shape!r}")


def classify_pixel_colors(image: np.ndarray) -> np.ndarray:
    """Map each pixel to a palette color index (1-based) or 0 for background."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    flat = image.reshape(-1, 3).astype(np.float64)
    palette = np.asarray(list(COLOR_RGB.values()), dtype=np.float64)
    dists = np.linalg.norm(flat[:, None, :] - palette[None, :, :], axis=2)
    nearest = np.argmin(dists, axis=1)
    best = dists[np.arange(len(flat)), nearest]
    labels = np.where(best <= _COLOR_TOLERANCE, nearest + 1, 0)
    return labels.reshape(image.shape[:2])


def classify_fill_ratio(ratio: float) -> str:
    if ratio >= _SQUARE_MIN_FILL:
        return "square"
    if ratio >= _CIRCLE_MIN_FILL:
        return "circle"
    return "triangle"


def analyze_components(image: np.ndarray) -> tuple[np.ndarray, dict[int, tuple[str, str]]]:
    """Find colored connected components and classify each as (color, shape).

    Returns an ``H x W`` int32 map of component ids (0 = background) and a
    dict from component id to the recovered (color, shape) pair.
    """
    color_names = list(COLOR_RGB)
    pixel_colors = classify_pixel_colors(image)
    component_map = np.zeros(image.shape[:2], dtype=np.int32)
    attributes: dict[int, tuple[str, str]] = {}
    structure = np.ones((3, 3), dtype=bool)

    next_id = 1
    for color_index, color_name in enumerate(color_names, start=1):
        labeled, count = ndimage.label(pixel_colors == color_index, structure=structure)
        for comp in range(1, count + 1):
            mask = labeled == comp
            area = int(mask.sum())
            if area < _MIN_COMPONENT_AREA:
                continue
            rows = np.any(mask, axis=1).nonzero()[0]
            cols = np.any(mask, axis=0).nonzero()[0]
            bbox_area = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
            shape = classify_fill_ratio(area / bbox_area)
            component_map[mask] = next_id
            attributes[next_id] = (color_name, shape)
            next_id += 1
    return component_map, attributes
