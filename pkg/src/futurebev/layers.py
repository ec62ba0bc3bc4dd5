"""Shared neural building blocks.

Contains the bilinear map sampler, the (optionally flow-conditioned)
single-map deformable attention, and small conv/MLP blocks used by the
encoder, predictor and decoder.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def sample_bilinear(features: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample feature maps at fractional grid positions.

    Args:
        features: (B, C, H, W).
        points: (B, P, 2) positions as (x, y) = (column, row) in cell
            coordinates, where (0, 0) is the center of the top-left cell.

    Returns:
        (B, C, P) sampled values.  Reads outside the map contribute zero,
        and the result is differentiable in both ``features`` and
        ``points``.  At exact lattice positions the sample equals the
        stored feature value.
    """
    b, c, h, w = features.shape
    x = points[..., 0]
    y = points[..., 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    flat = features.flatten(2)  # (B, C, H*W)
    out = features.new_zeros(b, c, points.shape[1])
    for dy, dx, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        # nan_to_num keeps non-finite sample positions (e.g. from a diverged
        # upstream network) from turning into out-of-range gather indices;
        # the NaN still reaches the output through the weight term.
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).nan_to_num(0.0).long()  # (B, P)
        vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(b, c, -1))
        out = out + vals * (weight * inside).unsqueeze(1)
    return out


class FlowGuidedDeformableAttention(nn.Module):
    """Multi-head deformable attention over a single BEV feature map.

    Each query attends to ``num_points`` sampled locations per head around
    its reference point; sampling offsets come from a linear projection of
    the query, optionally concatenated with the backward flow vector read
    at the reference point (``flow_conditioned=True``).  Attention weights
    always come from the query alone and are softmax-normalized over the
    sampled points of each head.
    """

    def __init__(
        self,
        channels: int,
        num_heads: int = 8,
        num_points: int = 4,
        flow_conditioned: bool = False,
    ):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.channels = channels
        self.num_heads = num_heads
        self.num_points = num_points
        self.head_dim = channels // num_heads
        self.flow_conditioned = flow_conditioned
        offset_in = channels + (2 if flow_conditioned else 0)
        self.sampling_offsets = nn.Linear(offset_in, num_heads * num_points * 2)
        self.attention_weights = nn.Linear(channels, num_heads * num_points)
        self.value_proj = nn.Linear(channels, channels)
        self.output_proj = nn.Linear(channels, channels)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # Start with zero offset weights and a fan of per-head directions in
        # the bias, so the initial samples form a small ring around the
        # reference point regardless of the query content.
        nn.init.zeros_(self.sampling_offsets.weight)
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (
            2.0 * math.pi / self.num_heads
        )
        directions = torch.stack([thetas.cos(), thetas.sin()], dim=-1)
        directions = directions / directions.abs().max(-1, keepdim=True).values
        bias = directions[:, None, :].repeat(1, self.num_points, 1)
        bias = bias * torch.arange(1, self.num_points + 1, dtype=torch.float32).view(1, -1, 1)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(bias.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(
        self,
        query: torch.Tensor,
        reference_points: torch.Tensor,
        value_map: torch.Tensor,
        flow_map: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Attend from queries to the value map.

        Args:
            query: (B, N, C).
            reference_points: (B, N, 2) normalized (x, y) in [0, 1]; the
                center of cell (i, j) corresponds to ((j+0.5)/W, (i+0.5)/H).
            value_map: (B, C, H, W).
            flow_map: (B, 2, H, W) backward flow in grid cells, required
                iff the module is flow-conditioned.

        Returns:
            (B, N, C).
        """
        b, n, c = query.shape
        h, w = value_map.shape[-2:]
        heads, points = self.num_heads, self.num_points
        value = self.value_proj(value_map.flatten(2).transpose(1, 2))  # (B, HW, C)
        value = (
            value.transpose(1, 2)
            .reshape(b, heads, self.head_dim, h, w)
            .flatten(0, 1)  # (B*heads, head_dim, H, W)
        )
        ref_cells = torch.stack(
            [reference_points[..., 0] * w - 0.5, reference_points[..., 1] * h - 0.5],
            dim=-1,
        )  # (B, N, 2) in cell coordinates
        if self.flow_conditioned:
            if flow_map is None:
                raise ValueError("flow-conditioned attention requires a flow map")
            flow_at_ref = sample_bilinear(flow_map, ref_cells).transpose(1, 2)  # (B, N, 2)
            offset_input = torch.cat([flow_at_ref, query], dim=-1)
        else:
            offset_input = query
        offsets = self.sampling_offsets(offset_input).view(b, n, heads, points, 2)
        weights = self.attention_weights(query).view(b, n, heads, points).softmax(dim=-1)
        locations = ref_cells[:, :, None, None, :] + offsets  # (B, N, heads, K, 2), cells
        locations = locations.permute(0, 2, 1, 3, 4).reshape(b * heads, n * points, 2)
        sampled = sample_bilinear(value, locations)  # (B*heads, head_dim, N*K)
        sampled = sampled.view(b, heads, self.head_dim, n, points)
        weights = weights.permute(0, 2, 1, 3)  # (B, heads, N, K)
        mixed = (sampled * weights.unsqueeze(2)).sum(dim=-1)  # (B, heads, head_dim, N)
        mixed = mixed.permute(0, 3, 1, 2).reshape(b, n, c)
        return self.output_proj(mixed)


class FlowGuidedAttentionLayer(nn.Module):
    """Pre-norm block: deformable attention + feed-forward, both residual."""

    def __init__(
        self,
        channels: int,
        num_heads: int,
        num_points: int,
        ffn_dim: int,
        flow_conditioned: bool,
    ):
        super().__init__()
        self.attention = FlowGuidedDeformableAttention(
            channels, num_heads, num_points, flow_conditioned=flow_conditioned
        )
        self.norm_attn = nn.LayerNorm(channels)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, channels)
        )

    def forward(self, query, reference_points, value_map, flow_map=None):
        query = query + self.attention(
            self.norm_attn(query), reference_points, value_map, flow_map
        )
        return query + self.ffn(self.norm_ffn(query))


def _group_count(channels: int) -> int:
    return math.gcd(channels, 8)


class ResidualConvBlock(nn.Module):
    """3x3 conv - GroupNorm - ReLU - 3x3 conv - GroupNorm with skip, stride 1."""

    def __init__(self, channels: int):
        super().__init__()
        groups = _group_count(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)), inplace=True)
        y = self.norm2(self.conv2(y))
        return F.relu(x + y, inplace=True)


class MLP(nn.Module):
    """Feed-forward stack of linear layers with ReLU between them."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int = 3):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(num_layers)
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def normalized_grid_reference_points(height: int, width: int) -> torch.Tensor:
    """(H*W, 2) normalized (x, y) cell-center reference points, row-major."""
    ys = (torch.arange(height, dtype=torch.float32) + 0.5) / height
    xs = (torch.arange(width, dtype=torch.float32) + 0.5) / width
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).reshape(-1, 2)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    x = x.clamp(eps, 1.0 - eps)
    return torch.log(x) - torch.log1p(-x)
