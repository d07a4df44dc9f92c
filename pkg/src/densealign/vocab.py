"""Category vocabularies, prompt templates, and text-embedding matrices.

A vocabulary is an ordered list of named categories tagged ``base`` (annotated
at training time) or ``novel`` (evaluation only), plus prompt templates used
to turn names into text-encoder inputs. Category order is a contract: every
score map downstream keeps its channels in vocabulary order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import LoadError

SPLITS = ("base", "novel")

# The widely used 80-template prompt set for ImageNet-style zero-shot
# classifiers. Configurable; most toy runs use a single template instead.
DEFAULT_PROMPT_TEMPLATES: tuple[str, ...] = (
    "a bad photo of a {}.",
    "a photo of many {}.",
    "a sculpture of a {}.",
    "a photo of the hard to see {}.",
    "a low resolution photo of the {}.",
    "a rendering of a {}.",
    "graffiti of a {}.",
    "a bad photo of the {}.",
    "a cropped photo of the {}.",
    "a tattoo of a {}.",
    "the embroidered {}.",
    "a photo of a hard to see {}.",
    "a bright photo of a {}.",
    "a photo of a clean {}.",
    "a photo of a dirty {}.",
    "a dark photo of the {}.",
    "a drawing of a {}.",
    "a photo of my {}.",
    "the plastic {}.",
    "a photo of the cool {}.",
    "a close-up photo of a {}.",
    "a black and white photo of the {}.",
    "a painting of the {}.",
    "a painting of a {}.",
    "a pixelated photo of the {}.",
    "a sculpture of the {}.",
    "a bright photo of the {}.",
    "a cropped photo of a {}.",
    "a plastic {}.",
    "a photo of the dirty {}.",
    "a jpeg corrupted photo of a {}.",
    "a blurry photo of the {}.",
    "a photo of the {}.",
    "a good photo of the {}.",
    "a rendering of the {}.",
    "a {} in a video game.",
    "a photo of one {}.",
    "a doodle of a {}.",
    "a close-up photo of the {}.",
    "a photo of a {}.",
    "the origami {}.",
    "the {} in a video game.",
    "a sketch of a {}.",
    "a doodle of the {}.",
    "a origami {}.",
    "a low resolution photo of a {}.",
    "the toy {}.",
    "a rendition of the {}.",
    "a photo of the clean {}.",
    "a photo of a large {}.",
    "a rendition of a {}.",
    "a photo of a nice {}.",
    "a photo of a weird {}.",
    "a blurry photo of a {}.",
    "a cartoon {}.",
    "art of a {}.",
    "a sketch of the {}.",
    "a embroidered {}.",
    "a pixelated photo of a {}.",
    "itap of the {}.",
    "a jpeg corrupted photo of the {}.",
    "a good photo of a {}.",
    "a plushie {}.",
    "a photo of the nice {}.",
    "a photo of the small {}.",
    "a photo of the weird {}.",
    "the cartoon {}.",
    "art of the {}.",
    "a drawing of the {}.",
    "a photo of the large {}.",
    "a black and white photo of a {}.",
    "the plushie {}.",
    "a dark photo of a {}.",
    "itap of a {}.",
    "graffiti of the {}.",
    "a toy {}.",
    "itap of my {}.",
    "a photo of a cool {}.",
    "a photo of a small {}.",
    "a tattoo of the {}.",
)

_EMB_MAGIC = "EDAEMB"
_EMB_VERSION = "v1"


@dataclass(frozen=True)
class CategoryVocabulary:
    """Ordered categories with base/novel tags and shared prompt templates."""

    categories: tuple[tuple[str, str], ...]
    prompt_templates: tuple[str, ...] = field(default=DEFAULT_PROMPT_TEMPLATES)

    def __post_init__(self) -> None:
        if not self.categories:
            raise ValueError("vocabulary has no categories")
        names = [name for name, _ in self.categories]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate category names: {dupes}")
        for name, split in self.categories:
            if not name or name != name.strip() or "\n" in name or "\r" in name:
                raise ValueError(f"invalid category name {name!r}")
            if split not in SPLITS:
                raise ValueError(f"category {name!r} has unknown split {split!r}")
        if not any(split == "base" for _, split in self.categories):
            raise ValueError("base split is empty")
        if not self.prompt_templates:
            raise ValueError("at least one prompt template is required")
        for tpl in self.prompt_templates:
            if tpl.count("{}") != 1:
                raise ValueError(f"template {tpl!r} must contain exactly one {{}} placeholder")

    def names(self, subset: str = "target") -> list[str]:
        """Category names in vocabulary order restricted to a split filter.

        ``subset`` is one of ``base``, ``novel``, or ``target`` (base + novel,
        i.e. the full inference vocabulary).
        """
        if subset == "target":
            return [name for name, _ in self.categories]
        if subset not in SPLITS:
            raise ValueError(f"unknown subset {subset!r}")
        return [name for name, split in self.categories if split == subset]

    @property
    def base_names(self) -> list[str]:
        return self.names("base")

    @property
    def novel_names(self) -> list[str]:
        return self.names("novel")

    def split_of(self, name: str) -> str:
        for cat, split in self.categories:
            if cat == name:
                return split
        raise KeyError(name)

    def prompts_for(self, name: str) -> list[str]:
        return [tpl.replace("{}", name) for tpl in self.prompt_templates]


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Unit-normalized text embeddings, one float32 row per category."""

    rows: np.ndarray
    category_names: tuple[str, ...]

    def __post_init__(self) -> None:
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2 or rows.shape[1] < 1:
            raise ValueError(f"rows must be a C x d matrix with d > 0, got {rows.shape}")
        if rows.shape[0] != len(self.category_names):
            raise ValueError(
                f"{rows.shape[0]} rows but {len(self.category_names)} category names")
        if not np.all(np.isfinite(rows)):
            raise ValueError("embedding matrix contains non-finite values")
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(f"rows are not unit norm (max deviation {worst:.2e})")

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def row_for(self, name: str) -> np.ndarray:
        return self.rows[self.category_names.index(name)]


def build_vocabulary(spec_file: str | Path) -> CategoryVocabulary:
    """Load a vocabulary from its JSON file format.

    Expected schema: ``{"categories": [{"name": ..., "split": ...}, ...],
    "templates": [...]}``. ``templates`` may be omitted to use the default
    80-template prompt set.
    """
    path = Path(spec_file)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read vocabulary file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"vocabulary file {path} is not valid JSON: {exc}") from exc

    if not isinstance(raw, dict) or "categories" not in raw:
        raise LoadError(f"vocabulary file {path} lacks a 'categories' list")
    try:
        categories = tuple((entry["name"], entry["split"]) for entry in raw["categories"])
    except (TypeError, KeyError) as exc:
        raise LoadError(f"vocabulary entries need 'name' and 'split' fields: {exc}") from exc

    templates = raw.get("templates")
    if templates is None:
        templates = DEFAULT_PROMPT_TEMPLATES
    elif not isinstance(templates, list) or not all(isinstance(t, str) for t in templates):
        raise LoadError("'templates' must be a list of strings")

    try:
        return CategoryVocabulary(categories=categories, prompt_templates=tuple(templates))
    except ValueError as exc:
        raise LoadError(f"invalid vocabulary in {path}: {exc}") from exc


def ensemble_prompt_embeddings(vocab: CategoryVocabulary, encoder, subset: str = "base",
                               ) -> EmbeddingMatrix:
    """Build one classifier row per category by averaging prompt embeddings.

    Each filled template is encoded and L2-normalized, the normalized vectors
    are averaged, and the mean is re-normalized. Averaging is commutative, so
    the result does not depend on template order. A zero mean (prompts that
    cancel exactly) has no defined direction and raises.
    """
    names = vocab.names(subset)
    if not names:
        raise ValueError(f"subset {subset!r} selects no categories")

    rows = []
    for name in names:
        encoded = []
        for prompt in vocab.prompts_for(name):
            vec = np.asarray(encoder.encode(prompt), dtype=np.float64).reshape(-1)
            norm = np.linalg.norm(vec)
            if not np.isfinite(norm) or norm < 1e-8:
                raise ValueError(f"encoder returned a degenerate vector for prompt {prompt!r}")
            encoded.append(vec / norm)
        mean = np.mean(encoded, axis=0)
        mean_norm = np.linalg.norm(mean)
        if mean_norm < 1e-8:
            raise ValueError(f"prompt ensemble for {name!r} cancels to the zero vector")
        rows.append(mean / mean_norm)

    matrix = np.asarray(rows, dtype=np.float32)
    # renormalize in float32 so the stored payload itself is unit norm
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
    return EmbeddingMatrix(rows=matrix, category_names=tuple(names))


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write the embedding file format; round trips are bit-exact."""
    rows, cols = matrix.rows.shape
    header = f"{_EMB_MAGIC} {_EMB_VERSION} {rows} {cols}\n"
    body = "".join(f"{name}\n" for name in matrix.category_names)
    payload = np.ascontiguousarray(matrix.rows.astype("<f4", copy=False)).tobytes()
    Path(path).write_bytes(header.encode("utf-8") + body.encode("utf-8") + payload)


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Read the embedding file format written by :func:`save_embeddings`."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read embedding file {path}: {exc}") from exc

    nl = blob.find(b"\n")
    if nl < 0:
        raise LoadError(f"{path}: missing header line")
    header = blob[:nl].decode("utf-8", errors="replace").split()
    if len(header) != 4 or header[0] != _EMB_MAGIC or header[1] != _EMB_VERSION:
        raise LoadError(f"{path}: malformed header {header!r}")
    try:
        rows, cols = int(header[2]), int(header[3])
    except ValueError as exc:
        raise LoadError(f"{path}: non-integer shape in header") from exc
    if rows < 1 or cols < 1:
        raise LoadError(f"{path}: header declares empty matrix {rows}x{cols}")

    names = []
    offset = nl + 1
    for _ in range(rows):
        nl = blob.find(b"\n", offset)
        if nl < 0:
            raise LoadError(f"{path}: fewer category names than header declares")
        names.append(blob[offset:nl].decode("utf-8"))
        offset = nl + 1

    payload = blob[offset:]
    expected = rows * cols * 4
    if len(payload) != expected:
        raise LoadError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    if not np.all(np.isfinite(matrix)):
        raise LoadError(f"{path}: payload contains non-finite values")
    try:
        return EmbeddingMatrix(rows=matrix, category_names=tuple(names))
    except ValueError as exc:
        raise LoadError(f"{path}: {exc}") from exc


def select_rows(matrix: EmbeddingMatrix, names: Sequence[str]) -> EmbeddingMatrix:
    """Restrict an embedding matrix to the given names, in the given order."""
    index = {name: i for i, name in enumerate(matrix.category_names)}
    missing = [n for n in names if n not in index]
    if missing:
        raise KeyError(f"names not present in embedding matrix: {missing}")
    sel = np.ascontiguousarray(matrix.rows[[index[n] for n in names]])
    return EmbeddingMatrix(rows=sel, category_names=tuple(names))
