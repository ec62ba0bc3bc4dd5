"""Full model: encoder -> flow-guided predictor -> instance decoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import Config
from .decoder import InstanceDecoder
from .encoder import BevEncoder
from .predictor import BevPredictor

RASTER_CHANNELS = 3  # occupancy + 2 velocity channels per input frame


@dataclass
class ModelOutput:
    bev_features: torch.Tensor      # (B, t_out + 1, C, H, W)
    flows: torch.Tensor | None      # (B, t_out, 2, H, W) or None without flow guidance
    class_logits: torch.Tensor      # (layers, B, M, num_classes + 1)
    boxes: torch.Tensor             # (layers, B, M, 9)
    mask_logits: torch.Tensor       # (B, M, t_out + 1, H, W)


class FutureBevModel(nn.Module):
    """End-to-end future instance prediction network."""

    def __init__(self, cfg: Config):
        super().__init__()
        m = cfg.model
        grid = cfg.world.grid
        self.t_in = cfg.world.t_in
        self.t_out = cfg.world.t_out
        self.encoder = BevEncoder(
            num_frames=cfg.world.t_in + 1,
            raster_channels=RASTER_CHANNELS,
            channels=m.channels,
        )
        self.predictor = BevPredictor(
            channels=m.channels,
            height=grid.height,
            width=grid.width,
            t_out=cfg.world.t_out,
            num_layers=m.num_predictor_layers,
            num_heads=m.num_heads,
            num_points=m.num_points,
            ffn_dim=m.ffn_dim,
            flow_guided=m.flow_guided,
        )
        self.decoder = InstanceDecoder(
            channels=m.channels,
            num_queries=m.num_queries,
            num_classes=m.num_classes,
            t_out=cfg.world.t_out,
            num_layers=m.num_decoder_layers,
            num_heads=m.num_heads,
            num_points=m.num_points,
            ffn_dim=m.ffn_dim,
            use_box_head=m.use_box_head,
        )

    def forward(self, rasters: torch.Tensor) -> ModelOutput:
        """Run the pipeline on input rasters (B, t_in + 1, 3, H, W)."""
        current = self.encoder(rasters)
        features, flows = self.predictor(current)
        decoded = self.decoder(features)
        return ModelOutput(
            bev_features=torch.stack(features, dim=1),
            flows=flows,
            class_logits=decoded.class_logits,
            boxes=decoded.boxes,
            mask_logits=decoded.mask_logits,
        )


def build_model(cfg: Config) -> FutureBevModel:
    return FutureBevModel(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
