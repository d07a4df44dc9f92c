"""Data ingestion: COCO-format annotations and the synthetic shapes world.

Training data only ever carries base-category boxes; the loaders enforce
that. The synthetic dataset renders colored shapes whose category names are
attribute pairs ("red circle"), with novel categories being unseen
combinations of seen attributes, so base-to-novel generalization can be
exercised on a desk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import synthetic
from .exceptions import LoadError
from .vocab import CategoryVocabulary


@dataclass(frozen=True)
class BoxAnnotation:
    """One ground-truth box: category name plus normalized xyxy coordinates."""

    category: str
    box: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"box {self.box} must have x1 < x2 and y1 < y2")
        if min(self.box) < -1e-6 or max(self.box) > 1.0 + 1e-6:
            raise ValueError(f"box {self.box} must lie inside [0, 1]")


@dataclass
class ImageSample:
    """An image with its annotations; pixels are H x W x 3 floats in [0, 1]."""

    image_id: int
    pixels: np.ndarray
    annotations: list[BoxAnnotation]
    cache_key: tuple = ()

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be H x W x 3, got {self.pixels.shape}")
        if min(self.pixels.shape[:2]) < 8:
            raise ValueError(f"image too small: {self.pixels.shape[:2]}")
        if not self.cache_key:
            self.cache_key = (self.image_id,)

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def flip_sample(sample: ImageSample) -> ImageSample:
    """Horizontal flip of pixels and boxes: x' = 1 - x."""
    flipped = [BoxAnnotation(category=a.category,
                             box=(1.0 - a.box[2], a.box[1], 1.0 - a.box[0], a.box[3]))
               for a in sample.annotations]
    return ImageSample(image_id=sample.image_id,
                       pixels=np.ascontiguousarray(sample.pixels[:, ::-1, :]),
                       annotations=flipped,
                       cache_key=sample.cache_key + ("flip",))


# ---------------------------------------------------------------------------
# COCO-format ingestion


@dataclass
class CocoDataset:
    """Parsed COCO-style annotations with lazy pixel loading."""

    samples: list[dict]
    category_names: list[str]
    image_root: Path | None
    image_size: int | None

    def __len__(self) -> int:
        return len(self.samples)

    def load(self, index: int) -> ImageSample:
        """Materialize one sample, reading and resizing pixels from disk."""
        from PIL import Image

        entry = self.samples[index]
        if self.image_root is None:
            raise LoadError("dataset was loaded without an image root; cannot read pixels")
        path = self.image_root / entry["file_name"]
        try:
            with Image.open(path) as img:
                img = img.convert("RGB")
                if self.image_size is not None:
                    img = img.resize((self.image_size, self.image_size), Image.BILINEAR)
                pixels = np.asarray(img, dtype=np.float32) / 255.0
        except OSError as exc:
            raise LoadError(f"cannot read image {path}: {exc}") from exc
        return ImageSample(image_id=entry["image_id"], pixels=pixels,
                           annotations=list(entry["annotations"]))


def load_coco_annotations(json_path: str | Path, vocab: CategoryVocabulary,
                          split_mode: str, image_root: str | Path | None = None,
                          image_size: int | None = None, strict: bool = True,
                          ) -> CocoDataset:
    """Parse a COCO-format JSON under a base/novel vocabulary.

    ``split_mode`` is ``train_base_only`` (drop every non-base annotation and
    every image left without annotations) or ``eval_all`` (keep base + novel
    annotations; images may have zero annotations). Annotations whose
    category is absent from the vocabulary are an error under ``strict``,
    otherwise silently dropped.
    """
    if split_mode not in ("train_base_only", "eval_all"):
        raise ValueError(f"unknown split_mode {split_mode!r}")
    path = Path(json_path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path} is not valid JSON: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise LoadError(f"{path} lacks the '{key}' section")

    id_to_name = {c["id"]: c["name"] for c in raw["categories"]}
    keep_names = set(vocab.base_names if split_mode == "train_base_only"
                     else vocab.names("target"))
    images = {img["id"]: img for img in raw["images"]}

    per_image: dict[int, list[BoxAnnotation]] = {img_id: [] for img_id in images}
    for ann in raw["annotations"]:
        img = images.get(ann["image_id"])
        if img is None:
            raise LoadError(f"annotation {ann.get('id')} references unknown image "
                            f"{ann['image_id']}")
        name = id_to_name.get(ann["category_id"])
        if name is None:
            raise LoadError(f"annotation {ann.get('id')} references unknown category id "
                            f"{ann['category_id']}")
        if name not in keep_names:
            if strict and split_mode == "eval_all" and name not in vocab.names("target"):
                raise LoadError(f"annotation category {name!r} is not in the vocabulary")
            continue
        x, y, w, h = ann["bbox"]
        iw, ih = float(img["width"]), float(img["height"])
        box = (max(x / iw, 0.0), max(y / ih, 0.0),
               min((x + w) / iw, 1.0), min((y + h) / ih, 1.0))
        per_image[img["id"]].append(BoxAnnotation(category=name, box=box))

    samples = []
    for img_id in sorted(per_image):
        anns = per_image[img_id]
        if split_mode == "train_base_only" and not anns:
            continue
        samples.append({"image_id": img_id, "file_name": images[img_id].get("file_name"),
                        "annotations": anns})
    return CocoDataset(samples=samples,
                       category_names=[c["name"] for c in raw["categories"]],
                       image_root=Path(image_root) if image_root else None,
                       image_size=image_size)


def load_split_file(path: str | Path) -> tuple[list[str], list[str]]:
    """Read a {"base": [...], "novel": [...]} split file."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return list(raw["base"]), list(raw["novel"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LoadError(f"invalid split file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic shapes


@dataclass
class SyntheticShapes:
    """Deterministic rendered dataset with base-only train and mixed eval splits."""

    train: list[ImageSample]
    eval: list[ImageSample]
    base_categories: list[str]
    novel_categories: list[str]
    image_size: int

    def vocabulary(self, templates: Sequence[str] = ("a photo of a {}.",),
                   ) -> CategoryVocabulary:
        cats = [(name, "base") for name in self.base_categories]
        cats += [(name, "novel") for name in self.novel_categories]
        return CategoryVocabulary(categories=tuple(cats), prompt_templates=tuple(templates))


def _render_image(rng: np.random.Generator, image_id: int, image_size: int,
                  categories: Sequence[str], min_objects: int, max_objects: int,
                  ) -> ImageSample:
    pixels = np.empty((image_size, image_size, 3), dtype=np.float32)
    pixels[:] = synthetic.BACKGROUND_RGB
    annotations: list[BoxAnnotation] = []
    occupied: list[tuple[float, float, float, float]] = []

    n_objects = int(rng.integers(min_objects, max_objects + 1))
    for _ in range(n_objects):
        name = str(rng.choice(list(categories)))
        color, shape = synthetic.parse_category(name)
        for _attempt in range(40):
            size = float(rng.uniform(0.20, 0.42) * image_size)
            half = size / 2
            cx = float(rng.uniform(half + 1, image_size - half - 1))
            cy = float(rng.uniform(half + 1, image_size - half - 1))
            margin = 2.0
            candidate = (cx - half - margin, cy - half - margin,
                         cx + half + margin, cy + half + margin)
            clash = any(c[0] < o[2] and o[0] < c[2] and c[1] < o[3] and o[1] < c[3]
                        for o, c in ((o, candidate) for o in occupied))
            if clash:
                continue
            mask = synthetic.shape_mask(shape, image_size, image_size, cx, cy, size)
            if not mask.any():
                continue
            pixels[mask] = synthetic.COLOR_RGB[color]
            rows = np.any(mask, axis=1).nonzero()[0]
            cols = np.any(mask, axis=0).nonzero()[0]
            box = (cols[0] / image_size, rows[0] / image_size,
                   (cols[-1] + 1) / image_size, (rows[-1] + 1) / image_size)
            annotations.append(BoxAnnotation(category=name, box=box))
            occupied.append(candidate)
            break
    return ImageSample(image_id=image_id, pixels=pixels, annotations=annotations)


DEFAULT_BASE_CATEGORIES = (
    "red circle", "red square", "red triangle",
    "green circle", "green square", "blue square",
    "blue triangle", "yellow circle", "yellow triangle",
)
DEFAULT_NOVEL_CATEGORIES = ("green triangle", "blue circle", "yellow square")


def synth_shapes(seed: int, n_images: int, image_size: int = 128,
                 base_cats: Sequence[str] = DEFAULT_BASE_CATEGORIES,
                 novel_cats: Sequence[str] = DEFAULT_NOVEL_CATEGORIES,
                 n_eval: int | None = None, min_objects: int = 1, max_objects: int = 4,
                 ) -> SyntheticShapes:
    """Render a deterministic shapes dataset.

    Train images draw only base categories; eval images draw from base plus
    novel, so every novel instance is an unseen attribute combination. Every
    category must parse as "<color> <shape>".
    """
    for name in (*base_cats, *novel_cats):
        synthetic.parse_category(name)
    overlap = set(base_cats) & set(novel_cats)
    if overlap:
        raise ValueError(f"categories cannot be both base and novel: {sorted(overlap)}")
    if not 1 <= min_objects <= max_objects:
        raise ValueError("need 1 <= min_objects <= max_objects")

    n_eval = n_images if n_eval is None else n_eval
    train = [_render_image(np.random.default_rng([seed, 0, i]), image_id=i,
                           image_size=image_size, categories=base_cats,
                           min_objects=min_objects, max_objects=max_objects)
             for i in range(n_images)]
    all_cats = tuple(base_cats) + tuple(novel_cats)
    evals = [_render_image(np.random.default_rng([seed, 1, i]), image_id=100_000 + i,
                           image_size=image_size, categories=all_cats,
                           min_objects=min_objects, max_objects=max_objects)
             for i in range(n_eval)]
    return SyntheticShapes(train=train, eval=evals, base_categories=list(base_cats),
                           novel_categories=list(novel_cats), image_size=image_size)


def batch_iterator(samples: Sequence[ImageSample], batch_size: int, seed: int,
                   augment: bool = False, epochs: int | None = 1,
                   ) -> Iterator[list[ImageSample]]:
    """Yield shuffled batches covering the dataset exhaustively each epoch.

    Shuffling is seeded per epoch, so the batch sequence is reproducible.
    With ``augment``, each drawn sample is horizontally flipped with
    probability 1/2 (also seeded). ``epochs=None`` streams forever.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), batch_size):
            batch = []
            for idx in order[start:start + batch_size]:
                sample = samples[int(idx)]
                if augment and rng.random() < 0.5:
                    sample = flip_sample(sample)
                batch.append(sample)
            yield batch
        epoch += 1
