"""Shared attention primitives: sine-cosine embeddings, bilinear sampling,
and multi-scale deformable attention.

Deformable attention follows the classic formulation: each query predicts,
per head, a small set of sampling offsets and softmax weights over
(levels x points), gathers bilinear samples around its reference, and mixes
them back through an output projection. Sampling is written with plain
gather ops (not grid_sample) so it runs in float64 and its gradients are
easy to reason about.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def sincos_position_embedding(
    coords: Tensor, dim_per_coord: int, temperature: float = 10000.0
) -> Tensor:
    """Fixed sine-cosine embedding of normalized coordinates.

    Args:
        coords: (..., n) values in [0, 1].
        dim_per_coord: even number of embedding dims per coordinate.

    Returns:
        (..., n * dim_per_coord) with interleaved (sin, cos) pairs per
        frequency; every element lies in [-1, 1].
    """
    if dim_per_coord % 2:
        raise ValueError("dim_per_coord must be even")
    half = dim_per_coord // 2
    exponent = torch.arange(half, dtype=coords.dtype, device=coords.device) / half
    inv_freq = (2 * math.pi) / temperature**exponent  # (half,)
    angles = coords[..., None] * inv_freq  # (..., n, half)
    pe = torch.stack([angles.sin(), angles.cos()], dim=-1)  # (..., n, half, 2)
    return pe.flatten(-3)


def point_position_embedding(points: Tensor, dim: int) -> Tensor:
    """(..., 2) normalized points -> (..., dim), dim/2 per coordinate."""
    return sincos_position_embedding(points, dim // 2)


def box_position_embedding(boxes: Tensor, dim: int) -> Tensor:
    """(..., 4) cxcywh boxes -> (..., dim), dim/4 per coordinate."""
    return sincos_position_embedding(boxes, dim // 4)


def bilinear_sample(value: Tensor, locations: Tensor) -> Tensor:
    """Bilinear interpolation with zero padding outside the map.

    Args:
        value: (G, C, H, W) feature maps.
        locations: (G, Q, 2) normalized (x, y); (0,0) and (1,1) are the map
            corners, pixel (i, j) is centered at ((i+0.5)/W, (j+0.5)/H).

    Returns:
        (G, Q, C) samples.
    """
    G, C, H, W = value.shape
    x = locations[..., 0] * W - 0.5
    y = locations[..., 1] * H - 0.5
    x0, y0 = x.floor(), y.floor()
    tx, ty = x - x0, y - y0

    flat = value.flatten(2)  # (G, C, H*W)
    out = None
    for dx, dy, wgt in (
        (0, 0, (1 - tx) * (1 - ty)),
        (1, 0, tx * (1 - ty)),
        (0, 1, (1 - tx) * ty),
        (1, 1, tx * ty),
    ):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).long()  # (G, Q)
        gathered = flat.gather(2, idx.unsqueeze(1).expand(G, C, -1))  # (G, C, Q)
        term = gathered * (wgt * inside.to(wgt.dtype)).unsqueeze(1)
        out = term if out is None else out + term
    return out.transpose(1, 2)


class MultiScaleDeformableAttention(nn.Module):
    """Deformable cross-attention over a multi-scale feature pyramid.

    References may be points (M, 2) — offsets are scaled by the per-level
    cell size — or boxes (M, 4) — offsets scaled by half the box extent over
    the point count, so attention stays conditioned on the prompt geometry.
    """

    def __init__(self, dim: int, n_heads: int, n_levels: int, n_points: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError("dim must be divisible by n_heads")
        self.dim = dim
        self.n_heads = n_heads
        self.n_levels = n_levels
        self.n_points = n_points
        self.head_dim = dim // n_heads
        self.sampling_offsets = nn.Linear(dim, n_heads * n_levels * n_points * 2)
        self.attention_weights = nn.Linear(dim, n_heads * n_levels * n_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self._reset_parameters()

    def _reset_parameters(self):
        # Grid-of-directions offset init so heads start looking around the
        # reference instead of collapsing onto it.
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        theta = torch.arange(self.n_heads, dtype=torch.float32) * (
            2.0 * math.pi / self.n_heads
        )
        grid = torch.stack([theta.cos(), theta.sin()], dim=-1)  # (heads, 2)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid.view(self.n_heads, 1, 1, 2).repeat(1, self.n_levels, self.n_points, 1)
        scale = torch.arange(1, self.n_points + 1, dtype=torch.float32)
        grid = grid * scale.view(1, 1, -1, 1)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def sampling_locations(
        self,
        query: Tensor,
        reference: Tensor,
        spatial_shapes: list[tuple[int, int]],
    ) -> Tensor:
        """(B, M, heads, levels, points, 2) normalized sampling positions."""
        B, M, _ = query.shape
        offsets = self.sampling_offsets(query).view(
            B, M, self.n_heads, self.n_levels, self.n_points, 2
        )
        if reference.shape[-1] == 4:
            center = reference[..., :2].view(B, M, 1, 1, 1, 2)
            extent = reference[..., 2:].view(B, M, 1, 1, 1, 2)
            return center + offsets / self.n_points * extent * 0.5
        if reference.shape[-1] != 2:
            raise ValueError("reference must be (.., 2) points or (.., 4) boxes")
        cells = torch.tensor(
            [[1.0 / w, 1.0 / h] for h, w in spatial_shapes],
            dtype=query.dtype,
            device=query.device,
        ).view(1, 1, 1, self.n_levels, 1, 2)
        center = reference.view(B, M, 1, 1, 1, 2)
        return center + offsets * cells

    def forward(
        self,
        query: Tensor,
        reference: Tensor,
        value: Tensor,
        spatial_shapes: list[tuple[int, int]],
    ) -> Tensor:
        """Attend from M queries into the flattened pyramid.

        Args:
            query: (B, M, dim).
            reference: (B, M, 2) normalized points or (B, M, 4) cxcywh boxes.
            value: (B, S, dim) where S = sum(H_l * W_l).
            spatial_shapes: per-level (H_l, W_l).

        Returns:
            (B, M, dim).
        """
        B, M, _ = query.shape
        if len(spatial_shapes) != self.n_levels:
            raise ValueError("spatial_shapes must list one (H, W) per level")
        locations = self.sampling_locations(query, reference, spatial_shapes)
        weights = self.attention_weights(query).view(
            B, M, self.n_heads, self.n_levels * self.n_points
        )
        weights = weights.softmax(-1).view(
            B, M, self.n_heads, self.n_levels, self.n_points
        )

        proj = self.value_proj(value).view(B, -1, self.n_heads, self.head_dim)
        out = query.new_zeros(B, M, self.n_heads, self.head_dim)
        start = 0
        for lvl, (h, w) in enumerate(spatial_shapes):
            chunk = proj[:, start : start + h * w]  # (B, HW, heads, hd)
            maps = chunk.permute(0, 2, 3, 1).reshape(B * self.n_heads, self.head_dim, h, w)
            locs = (
                locations[:, :, :, lvl]  # (B, M, heads, points, 2)
                .permute(0, 2, 1, 3, 4)
                .reshape(B * self.n_heads, M * self.n_points, 2)
            )
            samples = bilinear_sample(maps, locs).view(
                B, self.n_heads, M, self.n_points, self.head_dim
            )
            w_lvl = weights[:, :, :, lvl].permute(0, 2, 1, 3)  # (B, heads, M, points)
            out = out + (samples * w_lvl.unsqueeze(-1)).sum(3).permute(0, 2, 1, 3)
            start += h * w
        return self.output_proj(out.reshape(B, M, self.dim))


class FeedForward(nn.Module):
    """Two-layer transformer FFN."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.linear1 = nn.Linear(dim, hidden)
        self.linear2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear2(torch.relu(self.linear1(x)))


class MLP(nn.Module):
    """Simple k-layer ReLU MLP (used for box offset heads)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, n_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x
