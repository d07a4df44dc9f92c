"""Adapters for the frozen vision-language model.

The core library never assumes a concrete model family; it talks to a pair
of protocols. ``TextEncoder`` maps a string to a d-vector. A
``FrozenImageEncoder`` exposes the backbone patch tokens plus two pooling
paths over them: the ordinary attention-pooled class token (the image-level
feature) and a per-patch pooling pass conditioned on a diagonal attention
mask, which blocks information exchange between patches so each output
embedding depends on its own token only. With a single-token receptive
field the masked pass reduces analytically to the value projection followed
by the output projection, which is how it is implemented here.

A deterministic stub pair keeps everything testable without model weights:
the text stub hashes words to fixed unit vectors, and the image stub
recognizes the synthetic color/shape world and emits matching vectors, so
both modalities share a semantic space by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np
import torch
from torch import Tensor

from . import synthetic
from .exceptions import ConfigError


@dataclass
class PatchGrid:
    """A dense grid of feature vectors, one per stride x stride image cell."""

    values: Tensor  # (h, w, d)
    stride: int

    def __post_init__(self) -> None:
        self.values = torch.as_tensor(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"grid values must be h x w x d, got {tuple(self.values.shape)}")
        h, w, d = self.values.shape
        if h < 1 or w < 1 or d < 1:
            raise ValueError(f"grid dimensions must be positive, got {(h, w, d)}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        with torch.no_grad():
            if not bool(torch.isfinite(self.values).all()):
                raise ValueError("grid contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]

    @property
    def dim(self) -> int:
        return int(self.values.shape[2])


@runtime_checkable
class TextEncoder(Protocol):
    """Deterministic text-to-vector encoder."""

    dim: int

    def encode(self, text: str) -> np.ndarray: ...


@runtime_checkable
class FrozenImageEncoder(Protocol):
    """Frozen image encoder split into backbone and pooling paths."""

    dim: int
    stride: int

    def backbone(self, image: np.ndarray) -> PatchGrid: ...

    def pooled_class_token(self, image: np.ndarray) -> Tensor: ...

    def masked_patch_embeddings(self, image: np.ndarray) -> PatchGrid: ...

    def pool_masked(self, grid: PatchGrid) -> PatchGrid: ...

    def pool_class_token(self, grid: PatchGrid) -> Tensor: ...


def clip_similarity(img_encoder: FrozenImageEncoder, image: np.ndarray,
                    text_emb: np.ndarray) -> float:
    """Cosine similarity between the image's pooled class token and a text embedding."""
    text = torch.as_tensor(np.asarray(text_emb), dtype=torch.float64).reshape(-1)
    if text.numel() != img_encoder.dim:
        raise ValueError(f"text embedding dim {text.numel()} != encoder dim {img_encoder.dim}")
    norm = float(torch.linalg.vector_norm(text))
    if abs(norm - 1.0) > 1e-3:
        raise ValueError(f"text embedding must be unit norm, got |v| = {norm:.6f}")
    pooled = img_encoder.pooled_class_token(image).to(torch.float64).reshape(-1)
    return float(torch.dot(pooled / torch.linalg.vector_norm(pooled), text / norm))


def masked_dense_embeddings(img_encoder: FrozenImageEncoder, image: np.ndarray) -> PatchGrid:
    """Per-patch embeddings from the diagonal-masked pooling pass.

    Output patch (i, j) is a function of backbone token (i, j) only; the
    embeddings are not normalized here.
    """
    return img_encoder.masked_patch_embeddings(image)


# ---------------------------------------------------------------------------
# deterministic stubs


def _word_rng(seed: int, word: str) -> np.random.Generator:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


class StubTextEncoder:
    """Hashes each word of the input to a fixed unit vector and sums them.

    Same text always gives the same vector, and texts sharing words share
    vector components, e.g. "red circle" is closer to "red square" than to
    "blue square".
    """

    def __init__(self, seed: int, dim: int):
        if dim < 4:
            raise ValueError(f"dim must be >= 4, got {dim}")
        self.seed = seed
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def word_vector(self, word: str) -> np.ndarray:
        word = word.lower()
        if word not in self._cache:
            vec = _word_rng(self.seed, word).standard_normal(self.dim)
            self._cache[word] = vec / np.linalg.norm(vec)
        return self._cache[word]

    def encode(self, text: str) -> np.ndarray:
        words = [w for w in "".join(c if c.isalpha() else " " for c in text.lower()).split() if w]
        if not words:
            raise ValueError(f"text {text!r} contains no words")
        total = np.sum([self.word_vector(w) for w in words], axis=0)
        norm = np.linalg.norm(total)
        if norm < 1e-8:
            raise ValueError(f"text {text!r} encodes to a zero vector")
        return (total / norm).astype(np.float32)


def _random_orthogonal(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


class StubImageEncoder:
    """Recognizes the synthetic color/shape world and emits word-aligned tokens.

    Backbone tokens live in a rotated "vision" space; the value and output
    projections of the pooling layer rotate them back, so masked pooling
    lands each patch embedding on (color vector + shape vector + noise) in
    the text encoder's space. Background cells get a fixed "background"
    vector. A per-position noise field (frozen at construction) stands in
    for natural image variation.
    """

    _MAX_GRID = 64

    def __init__(self, seed: int, dim: int, stride: int = 8, noise: float = 0.08,
                 identity_projections: bool = False,
                 include_cls_in_masked_pass: bool = False):
        if dim < 4:
            raise ValueError(f"dim must be >= 4, got {dim}")
        self.seed = seed
        self.dim = dim
        self.stride = stride
        self.noise = noise
        # The diagonal mask gives every patch a single-token receptive field,
        # so class-token participation cannot change patch outputs; the flag
        # is accepted for interface parity and has no effect here.
        self.include_cls_in_masked_pass = include_cls_in_masked_pass
        self._words = StubTextEncoder(seed, dim)

        rng = np.random.default_rng([seed, 0x5EED])
        if identity_projections:
            value_to_semantic = np.eye(dim)
            self.value_projection = np.eye(dim, dtype=np.float32)
            self.output_projection = np.eye(dim, dtype=np.float32)
        else:
            a = _random_orthogonal(rng, dim)
            b = _random_orthogonal(rng, dim)
            self.value_projection = a.astype(np.float32)
            self.output_projection = b.astype(np.float32)
            value_to_semantic = b @ a
        # backbone emits tokens such that output_projection @ value_projection
        # maps them onto the semantic word vectors
        self._to_vision = np.linalg.inv(value_to_semantic).astype(np.float32)
        self._noise_field = (noise * rng.standard_normal(
            (self._MAX_GRID, self._MAX_GRID, dim))).astype(np.float32)

    def _semantic_cell_grid(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
        h_px, w_px = image.shape[:2]
        if h_px < self.stride or w_px < self.stride:
            raise ValueError(f"image {image.shape[:2]} smaller than one {self.stride}px cell")
        gh, gw = h_px // self.stride, w_px // self.stride
        if gh > self._MAX_GRID or gw > self._MAX_GRID:
            raise ValueError(f"grid {gh}x{gw} exceeds stub capacity {self._MAX_GRID}")

        component_map, attributes = synthetic.analyze_components(image)
        semantics = np.empty((gh, gw, self.dim), dtype=np.float32)
        bg = self._words.word_vector("background")
        for i in range(gh):
            for j in range(gw):
                cell = component_map[i * self.stride:(i + 1) * self.stride,
                                     j * self.stride:(j + 1) * self.stride]
                ids, counts = np.unique(cell[cell > 0], return_counts=True)
                if len(ids) and counts.max() >= cell.size // 8:
                    color, shape = attributes[int(ids[np.argmax(counts)])]
                    vec = self._words.word_vector(color) + self._words.word_vector(shape)
                else:
                    vec = bg
                semantics[i, j] = vec + self._noise_field[i, j]
        return semantics

    def backbone(self, image: np.ndarray) -> PatchGrid:
        semantics = self._semantic_cell_grid(image)
        tokens = semantics @ self._to_vision.T
        return PatchGrid(values=torch.from_numpy(tokens), stride=self.stride)

    def pool_masked(self, grid: PatchGrid) -> PatchGrid:
        values = grid.values.to(torch.float32)
        vproj = torch.from_numpy(self.value_projection)
        oproj = torch.from_numpy(self.output_projection)
        out = values @ vproj.T @ oproj.T
        return PatchGrid(values=out, stride=grid.stride)

    def pool_class_token(self, grid: PatchGrid) -> Tensor:
        pooled = self.pool_masked(grid)
        return pooled.values.mean(dim=(0, 1))

    def masked_patch_embeddings(self, image: np.ndarray) -> PatchGrid:
        return self.pool_masked(self.backbone(image))

    def pooled_class_token(self, image: np.ndarray) -> Tensor:
        return self.pool_class_token(self.backbone(image))


def stub_encoder_pair(seed: int, dim: int, **image_kwargs) -> tuple[StubTextEncoder, StubImageEncoder]:
    """Deterministic text/image encoder pair sharing one semantic space."""
    return StubTextEncoder(seed, dim), StubImageEncoder(seed, dim, **image_kwargs)


# ---------------------------------------------------------------------------
# registry

EncoderFactory = Callable[[dict], tuple[TextEncoder, FrozenImageEncoder]]
_REGISTRY: dict[str, EncoderFactory] = {}


def register_encoder(kind: str):
    def wrap(factory: EncoderFactory) -> EncoderFactory:
        _REGISTRY[kind] = factory
        return factory
    return wrap


@register_encoder("stub")
def _build_stub(config: dict) -> tuple[TextEncoder, FrozenImageEncoder]:
    kwargs = {k: config[k] for k in
              ("stride", "noise", "identity_projections", "include_cls_in_masked_pass")
              if k in config}
    return stub_encoder_pair(int(config.get("seed", 0)), int(config.get("dim", 32)), **kwargs)


@register_encoder("external")
def _build_external(config: dict) -> tuple[TextEncoder, FrozenImageEncoder]:
    spec = config.get("factory")
    if not spec or ":" not in spec:
        raise ConfigError(
            "external encoder needs a 'factory' of the form 'module:callable'; "
            "the callable receives the encoder config (including 'weights')")
    module_name, _, attr = spec.partition(":")
    import importlib

    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load external encoder factory {spec!r}: {exc}") from exc
    return factory(config)


def build_encoder_pair(config: dict) -> tuple[TextEncoder, FrozenImageEncoder]:
    """Construct the (text, image) encoder pair named by ``config['kind']``."""
    kind = config.get("kind", "stub")
    if kind not in _REGISTRY:
        raise ConfigError(f"unknown encoder kind {kind!r}; registered: {sorted(_REGISTRY)}")
    return _REGISTRY[kind](config)
