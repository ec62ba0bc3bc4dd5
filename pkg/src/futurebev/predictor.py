"""Flow-guided temporal BEV predictor.

Rolls the current BEV feature map forward one future frame at a time.
Each step first predicts a dense backward flow for the upcoming frame
from the previous feature map, then lets a stack of deformable-attention
layers build the new map: a learnable grid of BEV queries (shared across
steps, plus a learnable positional encoding) attends into the previous
map, with the predicted flow feeding the sampling-offset projection so
that each future cell can look where its content came from.
"""

from __future__ import annotations

import torch
from torch import nn

from .layers import (
    FlowGuidedAttentionLayer,
    ResidualConvBlock,
    normalized_grid_reference_points,
)


class FlowHead(nn.Module):
    """Backward-flow prediction subnet: stem + two residual blocks + 1x1 out.

    The final projection is zero-initialized so a fresh model predicts
    zero motion everywhere, which keeps early training stable.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.stem = nn.Conv2d(channels, channels, 3, padding=1)
        self.blocks = nn.Sequential(ResidualConvBlock(channels), ResidualConvBlock(channels))
        self.out = nn.Conv2d(channels, 2, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        return self.out(self.blocks(self.stem(feature_map)))


class BevPredictor(nn.Module):
    """Produce future BEV feature maps from the current one.

    Flow subnets are separate per future step (motion statistics differ
    with horizon), while the attention layers are shared across steps and
    applied sequentially within each step.  With ``flow_guided=False`` the
    flow subnets are dropped entirely and the attention falls back to
    query-only offset prediction.
    """

    def __init__(
        self,
        channels: int,
        height: int,
        width: int,
        t_out: int,
        num_layers: int = 4,
        num_heads: int = 8,
        num_points: int = 4,
        ffn_dim: int = 256,
        flow_guided: bool = True,
    ):
        super().__init__()
        self.height = height
        self.width = width
        self.t_out = t_out
        self.flow_guided = flow_guided
        n = height * width
        self.query_embed = nn.Parameter(torch.empty(1, n, channels))
        self.pos_embed = nn.Parameter(torch.empty(1, n, channels))
        nn.init.normal_(self.query_embed, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)
        self.layers = nn.ModuleList(
            FlowGuidedAttentionLayer(
                channels, num_heads, num_points, ffn_dim, flow_conditioned=flow_guided
            )
            for _ in range(num_layers)
        )
        if flow_guided:
            self.flow_heads = nn.ModuleList(FlowHead(channels) for _ in range(t_out))
        else:
            self.flow_heads = None
        self.register_buffer(
            "reference_points", normalized_grid_reference_points(height, width).unsqueeze(0)
        )

    def forward(self, current: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor | None]:
        """Roll out future features.

        Args:
            current: (B, C, H, W) current-frame BEV feature map.

        Returns:
            ``(features, flows)`` where ``features`` is a list of t_out+1
            maps (index 0 is ``current`` itself) and ``flows`` is
            (B, t_out, 2, H, W) predicted backward flow, or None when the
            predictor runs without flow guidance.
        """
        b, c, h, w = current.shape
        if (h, w) != (self.height, self.width):
            raise ValueError(f"predictor built for {self.height}x{self.width}, got {h}x{w}")
        refs = self.reference_points.expand(b, -1, -1)
        features = [current]
        flows = []
        for t in range(self.t_out):
            previous = features[-1]
            flow = self.flow_heads[t](previous) if self.flow_guided else None
            q = (self.query_embed + self.pos_embed).expand(b, -1, -1)
            for layer in self.layers:
                q = layer(q, refs, previous, flow)
            features.append(q.transpose(1, 2).reshape(b, c, h, w))
            if flow is not None:
                flows.append(flow)
        flow_stack = torch.stack(flows, dim=1) if flows else None
        return features, flow_stack
