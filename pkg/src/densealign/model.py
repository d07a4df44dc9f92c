"""Trainable detector: conv backbone, query decoder, and branch heads.

The backbone is a small strided conv net whose stage outputs play the role
of the usual residual stages (stage i has stride 2^i). Dense classification
features come from fusing configured stages onto the finest one and
projecting to the text-embedding dimension; proposals come from a DETR-like
encoder/decoder over one backbone stage with plain multi-head attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoders import PatchGrid
from .proposals import DecoderConfig
from .scoring import fuse_backbone_levels

STAGE_CHANNELS = {1: 24, 2: 48, 3: 96, 4: 128}


class ConvBackbone(nn.Module):
    """Four conv stages at strides 2, 4, 8, 16, each a strided conv + norm + ReLU."""

    def __init__(self, channels: dict[int, int] | None = None):
        super().__init__()
        self.channels = dict(channels or STAGE_CHANNELS)
        blocks = []
        in_ch = 3
        for stage in sorted(self.channels):
            out_ch = self.channels[stage]
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(4, out_ch),
                nn.ReLU(inplace=True),
                nn.Conv2d(out_ch, out_ch, kernel_size=3, stride=1, padding=1),
                nn.GroupNorm(4, out_ch),
                nn.ReLU(inplace=True),
            ))
            in_ch = out_ch
        self.stages = nn.ModuleList(blocks)

    def forward(self, images: Tensor) -> dict[int, Tensor]:
        """Map (B, 3, H, W) images to {stage: (B, C_stage, H/2^stage, W/2^stage)}."""
        out = {}
        x = images
        for stage, block in zip(sorted(self.channels), self.stages):
            x = block(x)
            out[stage] = x
        return out


def sine_position_encoding(height: int, width: int, dim: int, temperature: float = 10000.0,
                           ) -> Tensor:
    """2D sine/cosine positional features of shape (height * width, dim).

    Cell-center coordinates are normalized to (0, 2*pi] per axis so the
    lowest-frequency channels sweep a full phase across the grid regardless
    of its size.
    """
    if dim % 4 != 0:
        raise ValueError(f"dim must be divisible by 4, got {dim}")
    half = dim // 2
    scale = 2 * math.pi
    ys = (torch.arange(height, dtype=torch.float32) + 0.5) / height * scale
    xs = (torch.arange(width, dtype=torch.float32) + 0.5) / width * scale
    dim_t = temperature ** (2 * (torch.arange(half, dtype=torch.float32) // 2) / half)
    y_ang = ys[:, None] / dim_t[None, :]  # (h, dim/2)
    x_ang = xs[:, None] / dim_t[None, :]  # (w, dim/2)
    y_emb = torch.stack([y_ang[:, 0::2].sin(), y_ang[:, 1::2].cos()], dim=2).flatten(1)
    x_emb = torch.stack([x_ang[:, 0::2].sin(), x_ang[:, 1::2].cos()], dim=2).flatten(1)
    pos = torch.cat([
        y_emb[:, None, :].expand(height, width, half),
        x_emb[None, :, :].expand(height, width, half),
    ], dim=2)
    return pos.reshape(height * width, dim)


class DecoderLayer(nn.Module):
    """Pre-norm block: query self-attention, cross-attention to memory, FFN.

    Pre-norm keeps gradients well-scaled without a warmup schedule, which
    matters at the short step budgets this package trains with.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int | None = None):
        super().__init__()
        ffn_dim = ffn_dim or 4 * dim
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True),
                                 nn.Linear(ffn_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, queries: Tensor, query_pos: Tensor, memory: Tensor,
                memory_pos: Tensor) -> Tensor:
        x = self.norm1(queries)
        attended, _ = self.self_attn(x + query_pos, x + query_pos, x, need_weights=False)
        queries = queries + attended
        x = self.norm2(queries)
        attended, _ = self.cross_attn(x + query_pos, memory + memory_pos, memory,
                                      need_weights=False)
        queries = queries + attended
        return queries + self.ffn(self.norm3(queries))


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


@dataclass
class ProposalOutputs:
    """Raw proposal-branch tensors for one batch.

    ``boxes``/``objectness`` come from the final decoder layer; the
    ``layer_*`` stacks hold every layer's predictions through the same heads
    for deep supervision during training.
    """

    boxes: Tensor             # (B, Q, 4) cxcywh, sigmoid-bounded
    objectness: Tensor        # (B, Q) in (0, 1)
    states: Tensor            # (L, B, Q, hidden)
    layer_boxes: Tensor       # (L, B, Q, 4)
    layer_objectness: Tensor  # (L, B, Q)


def _grid_reference_logits(num_queries: int) -> Tensor:
    """Initial query reference points: a uniform grid over the unit square, as logits."""
    side = math.ceil(math.sqrt(num_queries))
    centers = (torch.arange(side, dtype=torch.float32) + 0.5) / side
    ys, xs = torch.meshgrid(centers, centers, indexing="ij")
    points = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)[:num_queries]
    return torch.log(points / (1.0 - points))


class ProposalNetwork(nn.Module):
    """DETR-style class-agnostic proposal head over one feature grid.

    Every query owns a learnable reference point (grid-initialized); the box
    head predicts logit-space offsets from it, which converges far faster
    than absolute regression at small step budgets.
    """

    _WH_BIAS = -1.0  # sigmoid(-1) ~ 0.27, a typical toy object extent

    def __init__(self, feature_dim: int, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(feature_dim, cfg.hidden_dim)
        enc_layer = nn.TransformerEncoderLayer(
            cfg.hidden_dim, cfg.num_heads, dim_feedforward=4 * cfg.hidden_dim,
            dropout=0.0, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.num_encoder_layers) \
            if cfg.num_encoder_layers > 0 else None
        self.query_embed = nn.Embedding(cfg.num_queries, cfg.hidden_dim)
        self.reference_logits = nn.Parameter(_grid_reference_logits(cfg.num_queries))
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.hidden_dim, cfg.num_heads) for _ in range(cfg.num_layers))
        self.box_head = MLP(cfg.hidden_dim, cfg.hidden_dim, 4, layers=3)
        self.obj_head = nn.Linear(cfg.hidden_dim, 1)

    def forward(self, features: Tensor) -> ProposalOutputs:
        """``features`` is (B, h, w, feature_dim); returns all query predictions."""
        b, h, w, _ = features.shape
        memory = self.input_proj(features.reshape(b, h * w, -1))
        memory_pos = sine_position_encoding(h, w, self.cfg.hidden_dim).to(memory.dtype)
        memory_pos = memory_pos.unsqueeze(0).expand(b, -1, -1)
        if self.encoder is not None:
            memory = self.encoder(memory + memory_pos)

        query_pos = self.query_embed.weight.unsqueeze(0).expand(b, -1, -1)
        queries = torch.zeros_like(query_pos)
        states = []
        for layer in self.layers:
            queries = layer(queries, query_pos, memory, memory_pos)
            states.append(queries)
        stacked = torch.stack(states)  # (L, B, Q, hidden)

        deltas = self.box_head(stacked)
        offsets = torch.cat([
            self.reference_logits.expand(*deltas.shape[:-1], 2)[..., :2],
            torch.full_like(deltas[..., 2:], self._WH_BIAS),
        ], dim=-1)
        layer_boxes = torch.sigmoid(deltas + offsets)
        layer_objectness = torch.sigmoid(self.obj_head(stacked)).squeeze(-1)
        return ProposalOutputs(boxes=layer_boxes[-1], objectness=layer_objectness[-1],
                               states=stacked, layer_boxes=layer_boxes,
                               layer_objectness=layer_objectness)

    def propose(self, grid: PatchGrid) -> tuple[Tensor, Tensor, Tensor]:
        """Single-image convenience: (Q, 4) boxes, (Q,) objectness, (L, Q, hidden) states."""
        out = self.forward(grid.values.unsqueeze(0))
        return out.boxes[0], out.objectness[0], out.states[:, 0]


@dataclass
class DetectorOutputs:
    """Everything one forward pass produces for a batch."""

    dense_features: Tensor  # (B, h, w, embed_dim) on the fused grid
    dense_stride: int
    proposals: ProposalOutputs


class OpenVocabDetector(nn.Module):
    """Backbone + dense-alignment features + proposal branch + baseline head.

    ``fuse_levels`` picks the backbone stages whose features are merged into
    the dense classification grid (stage i has stride 2^i); the proposal
    branch reads ``proposal_level``. ``embed_dim`` must equal the text
    embedding dimension so grid features compare against classifier rows.
    """

    def __init__(self, embed_dim: int, decoder_cfg: DecoderConfig,
                 fuse_levels: tuple[int, ...] = (2, 3), proposal_level: int = 3,
                 channels: dict[int, int] | None = None):
        super().__init__()
        self.embed_dim = embed_dim
        self.decoder_cfg = decoder_cfg
        self.fuse_levels = tuple(fuse_levels)
        self.proposal_level = proposal_level
        self.backbone = ConvBackbone(channels)
        for level in (*self.fuse_levels, proposal_level):
            if level not in self.backbone.channels:
                raise ValueError(f"backbone has no stage {level}")
        self.level_projections = nn.ModuleList(
            nn.Linear(self.backbone.channels[lvl], embed_dim) for lvl in self.fuse_levels)
        self.proposal_net = ProposalNetwork(self.backbone.channels[proposal_level],
                                            decoder_cfg)
        self.object_align_head = nn.Linear(decoder_cfg.hidden_dim, embed_dim)

    def dense_feature_grids(self, stage_maps: dict[int, Tensor]) -> tuple[Tensor, int]:
        """Fuse the configured stages for a whole batch; returns (B, h, w, d) and stride."""
        batch = stage_maps[self.fuse_levels[0]].shape[0]
        fused = []
        stride = 0
        for i in range(batch):
            grids = [PatchGrid(values=stage_maps[lvl][i].permute(1, 2, 0), stride=2 ** lvl)
                     for lvl in self.fuse_levels]
            merged = fuse_backbone_levels(grids, projections=list(self.level_projections))
            fused.append(merged.values)
            stride = merged.stride
        return torch.stack(fused), stride

    def forward(self, images: Tensor) -> DetectorOutputs:
        stage_maps = self.backbone(images)
        dense, stride = self.dense_feature_grids(stage_maps)
        prop_feats = stage_maps[self.proposal_level].permute(0, 2, 3, 1)
        return DetectorOutputs(dense_features=dense, dense_stride=stride,
                               proposals=self.proposal_net(prop_feats))

    def dense_grid(self, outputs: DetectorOutputs, index: int) -> PatchGrid:
        return PatchGrid(values=outputs.dense_features[index], stride=outputs.dense_stride)


def build_detector(embed_dim: int, decoder_cfg: DecoderConfig, fuse_levels=(2, 3),
                   proposal_level: int = 3, seed: int | None = None,
                   channels: dict[int, int] | None = None) -> OpenVocabDetector:
    """Construct a detector, optionally with seeded parameter initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return OpenVocabDetector(embed_dim, decoder_cfg, fuse_levels=tuple(fuse_levels),
                             proposal_level=proposal_level, channels=channels)
