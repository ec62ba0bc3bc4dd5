"""Query-based instance decoder with per-frame segmentation heads.

A fixed set of learnable instance queries is refined by a stack of
decoder layers (self-attention among queries, deformable cross-attention
into the current-frame BEV feature map, feed-forward), with per-layer
reference-point refinement.  Class and box heads run on every layer's
output so intermediate layers can be supervised; segmentation logits are
produced only from the final layer by taking, per future frame, the dot
product between a frame-specific embedding of each query and a
frame-specific context transform of that frame's BEV feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import (
    FlowGuidedDeformableAttention,
    MLP,
    ResidualConvBlock,
    inverse_sigmoid,
)

# Box regression layout (9 values per query).  Centers are normalized grid
# coordinates in [0, 1]; the height slot is fixed to zero in the flat
# synthetic world but kept so the vector matches a full 3D box encoding;
# sizes are log of normalized extent; velocity is in grid widths per frame.
BOX_CX = 0
BOX_CY = 1
BOX_Z = 2
BOX_LOG_L = 3
BOX_LOG_W = 4
BOX_SIN_YAW = 5
BOX_COS_YAW = 6
BOX_VX = 7
BOX_VY = 8
BOX_DIM = 9


class DecoderLayer(nn.Module):
    """Pre-norm: self-attention, deformable cross-attention, feed-forward."""

    def __init__(self, channels: int, num_heads: int, num_points: int, ffn_dim: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(channels, num_heads, batch_first=True)
        self.cross_attn = FlowGuidedDeformableAttention(
            channels, num_heads, num_points, flow_conditioned=False
        )
        self.norm_self = nn.LayerNorm(channels)
        self.norm_cross = nn.LayerNorm(channels)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, channels)
        )

    def forward(self, queries, query_pos, reference_points, value_map):
        x = self.norm_self(queries)
        qk = x + query_pos
        attended, _ = self.self_attn(qk, qk, x, need_weights=False)
        queries = queries + attended
        x = self.norm_cross(queries)
        queries = queries + self.cross_attn(x + query_pos, reference_points, value_map)
        return queries + self.ffn(self.norm_ffn(queries))


@dataclass
class DecoderOutput:
    class_logits: torch.Tensor      # (layers, B, M, num_classes + 1)
    boxes: torch.Tensor             # (layers, B, M, BOX_DIM)
    mask_logits: torch.Tensor       # (B, M, t_out + 1, H, W), final layer only
    reference_points: torch.Tensor  # (layers, B, M, 2)


class InstanceDecoder(nn.Module):
    def __init__(
        self,
        channels: int,
        num_queries: int,
        num_classes: int,
        t_out: int,
        num_layers: int = 6,
        num_heads: int = 8,
        num_points: int = 4,
        ffn_dim: int = 256,
        use_box_head: bool = True,
    ):
        super().__init__()
        self.num_queries = num_queries
        self.num_classes = num_classes
        self.t_out = t_out
        self.use_box_head = use_box_head
        self.query_content = nn.Parameter(torch.empty(1, num_queries, channels))
        self.query_pos = nn.Parameter(torch.empty(1, num_queries, channels))
        nn.init.normal_(self.query_content, std=0.02)
        nn.init.normal_(self.query_pos, std=0.02)
        self.reference_head = nn.Linear(channels, 2)
        self.layers = nn.ModuleList(
            DecoderLayer(channels, num_heads, num_points, ffn_dim) for _ in range(num_layers)
        )
        self.final_norm = nn.LayerNorm(channels)
        self.class_head = MLP(channels, channels, num_classes + 1, num_layers=3)
        self.box_head = MLP(channels, channels, BOX_DIM, num_layers=3) if use_box_head else None
        # Per-frame, non-shared segmentation heads: an MLP on the query side
        # and a small residual conv net on the feature side.
        self.mask_query_heads = nn.ModuleList(
            MLP(channels, channels, channels, num_layers=3) for _ in range(t_out + 1)
        )
        self.mask_context_heads = nn.ModuleList(
            nn.Sequential(ResidualConvBlock(channels), ResidualConvBlock(channels))
            for _ in range(t_out + 1)
        )

    def forward(self, features: list[torch.Tensor]) -> DecoderOutput:
        """Decode instances from the BEV feature sequence.

        ``features`` holds t_out + 1 maps (current first), each (B, C, H, W);
        cross-attention reads the current map, segmentation heads use all.
        """
        if len(features) != self.t_out + 1:
            raise ValueError(f"expected {self.t_out + 1} feature maps, got {len(features)}")
        current = features[0]
        b = current.shape[0]
        queries = self.query_content.expand(b, -1, -1)
        query_pos = self.query_pos.expand(b, -1, -1)
        refs = torch.sigmoid(self.reference_head(self.query_pos)).expand(b, -1, -1)

        all_logits, all_boxes, all_refs = [], [], []
        hidden = queries
        for layer in self.layers:
            hidden = layer(hidden, query_pos, refs, current)
            decoded = self.final_norm(hidden)
            all_logits.append(self.class_head(decoded))
            all_refs.append(refs)
            if self.use_box_head:
                # The box head predicts the center as a correction to the
                # layer's reference point; the corrected center (detached)
                # becomes the next layer's reference point, so box
                # supervision is what trains the refinement.
                box = self.box_head(decoded)
                center = torch.sigmoid(inverse_sigmoid(refs) + box[..., :2])
                all_boxes.append(torch.cat([center, box[..., 2:]], dim=-1))
                refs = center.detach()

        final = self.final_norm(hidden)
        mask_logits = []
        for t, feat in enumerate(features):
            q_t = self.mask_query_heads[t](final)              # (B, M, C)
            ctx_t = self.mask_context_heads[t](feat)           # (B, C, H, W)
            mask_logits.append(torch.einsum("bmc,bchw->bmhw", q_t, ctx_t))
        masks = torch.stack(mask_logits, dim=2)                # (B, M, T+1, H, W)

        if self.use_box_head:
            boxes = torch.stack(all_boxes)
        else:
            boxes = torch.zeros(
                len(self.layers), b, self.num_queries, BOX_DIM, device=current.device,
                dtype=current.dtype,
            )
        return DecoderOutput(
            class_logits=torch.stack(all_logits),
            boxes=boxes,
            mask_logits=masks,
            reference_points=torch.stack(all_refs),
        )
