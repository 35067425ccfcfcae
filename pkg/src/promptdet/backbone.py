"""Image encoder: a small strided conv pyramid plus deformable-attention
refinement layers.

The full-scale recipe uses a pretrained hierarchical transformer backbone;
here a 3-4 stage conv net stands in, since everything downstream only needs
a multi-scale grid of D-dim features.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .attention import FeedForward, MultiScaleDeformableAttention, point_position_embedding
from .config import ModelConfig


@dataclass
class MultiScaleFeatures:
    """L coarsening feature maps sharing one channel width.

    levels[i] is (B, C, H_i, W_i) with H_{i+1} <= H_i. ``flat`` views are the
    common currency of the attention modules.
    """

    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("need at least 2 pyramid levels")
        channels = {t.shape[1] for t in self.levels}
        if len(channels) != 1:
            raise ValueError("levels must share a channel count")
        heights = [t.shape[2] for t in self.levels]
        if any(b > a for a, b in zip(heights, heights[1:])):
            raise ValueError("levels must coarsen monotonically")

    @property
    def batch_size(self) -> int:
        return self.levels[0].shape[0]

    @property
    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [(t.shape[2], t.shape[3]) for t in self.levels]

    def flatten(self) -> Tensor:
        """(B, S, C) with S = sum(H_i * W_i), levels concatenated in order."""
        return torch.cat([t.flatten(2).transpose(1, 2) for t in self.levels], dim=1)

    @staticmethod
    def from_flat(flat: Tensor, spatial_shapes: list[tuple[int, int]]) -> "MultiScaleFeatures":
        levels, start = [], 0
        B, _, C = flat.shape
        for h, w in spatial_shapes:
            chunk = flat[:, start : start + h * w]
            levels.append(chunk.transpose(1, 2).reshape(B, C, h, w))
            start += h * w
        return MultiScaleFeatures(levels)

    def location_grid(self) -> Tensor:
        """(S, 2) normalized (x, y) centers of every location, level-major."""
        coords = []
        for h, w in self.spatial_shapes:
            ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
            xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            coords.append(torch.stack([gx, gy], dim=-1).reshape(-1, 2))
        return torch.cat(coords, dim=0).to(self.levels[0].dtype)

    def level_index(self) -> Tensor:
        """(S,) level id of each flattened location."""
        ids = [
            torch.full((h * w,), i, dtype=torch.long)
            for i, (h, w) in enumerate(self.spatial_shapes)
        ]
        return torch.cat(ids)


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    groups = min(8, cout)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


class ConvBackbone(nn.Module):
    """Strided conv pyramid emitting D-channel maps at strides 8, 16, 32, ..."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.backbone_channels
        self.coarsest_stride = cfg.strides[-1]
        self.stem = nn.Sequential(
            _conv_block(3, c, 2), _conv_block(c, c, 2), _conv_block(c, 2 * c, 2)
        )
        self.stages = nn.ModuleList(
            _conv_block(2 * c, 2 * c, 2) for _ in range(cfg.num_levels - 1)
        )
        self.projections = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(2 * c, cfg.embed_dim, 1),
                nn.GroupNorm(min(8, cfg.embed_dim), cfg.embed_dim),
            )
            for _ in range(cfg.num_levels)
        )

    def forward(self, images: Tensor) -> MultiScaleFeatures:
        """(B, 3, H, W) normalized RGB -> pyramid at strides 8/16/32/...

        H and W must be divisible by (and no smaller than) the coarsest
        stride so every level has an integral grid.
        """
        h, w = images.shape[-2:]
        s = self.coarsest_stride
        if h < s or w < s:
            raise ValueError(f"image {h}x{w} smaller than coarsest stride {s}")
        if h % s or w % s:
            raise ValueError(f"image dims must be divisible by {s}, got {h}x{w}")
        x = self.stem(images)
        taps = [x]
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return MultiScaleFeatures([proj(t) for proj, t in zip(self.projections, taps)])


class DeformableEncoderLayer(nn.Module):
    """Pre-norm block: deformable self-attention (each location queries its
    own reference point) followed by a feed-forward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = MultiScaleDeformableAttention(
            cfg.embed_dim, cfg.n_heads, cfg.num_levels, cfg.n_points
        )
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_ratio * cfg.embed_dim)

    def forward(
        self,
        x: Tensor,
        pos: Tensor,
        references: Tensor,
        spatial_shapes: list[tuple[int, int]],
    ) -> Tensor:
        t = self.norm1(x)
        x = x + self.attn(t + pos, references, t, spatial_shapes)
        x = x + self.ffn(self.norm2(x))
        return x


class ImageEncoder(nn.Module):
    """Backbone + n_enc_layers of deformable self-attention refinement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ConvBackbone(cfg)
        self.layers = nn.ModuleList(
            DeformableEncoderLayer(cfg) for _ in range(cfg.n_enc_layers)
        )
        self.level_embed = nn.Parameter(torch.zeros(cfg.num_levels, cfg.embed_dim))
        nn.init.normal_(self.level_embed, std=0.02)

    def extract_features(self, images: Tensor) -> MultiScaleFeatures:
        return self.backbone(images)

    def encode(self, features: MultiScaleFeatures) -> MultiScaleFeatures:
        """Refine the pyramid in place-shape: output levels match input."""
        shapes = features.spatial_shapes
        flat = features.flatten()  # (B, S, D)
        grid = features.location_grid().to(flat.device)  # (S, 2)
        pos = point_position_embedding(grid, self.cfg.embed_dim)
        pos = pos + self.level_embed.to(pos.dtype)[features.level_index()]
        pos = pos.unsqueeze(0)
        refs = grid.unsqueeze(0).expand(flat.shape[0], -1, -1)
        for layer in self.layers:
            flat = layer(flat, pos, refs, shapes)
        return MultiScaleFeatures.from_flat(flat, shapes)

    def forward(self, images: Tensor) -> MultiScaleFeatures:
        return self.encode(self.extract_features(images))
