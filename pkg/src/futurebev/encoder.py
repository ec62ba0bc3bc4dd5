"""Convolutional BEV feature encoder.

Stands in for a full camera-to-BEV perception stack: the synthetic world
already provides rasterized occupancy and velocity maps per input frame,
so the encoder only has to fuse them into a single current-frame feature
map.  Frames are stacked along channels and passed through a stride-1
stem plus four residual blocks, keeping the spatial resolution identical
to the grid.
"""

from __future__ import annotations

import torch
from torch import nn

from .layers import ResidualConvBlock


class BevEncoder(nn.Module):
    """(B, T_in+1, raster_channels, H, W) -> (B, channels, H, W)."""

    def __init__(self, num_frames: int, raster_channels: int, channels: int, num_blocks: int = 4):
        super().__init__()
        self.num_frames = num_frames
        self.raster_channels = raster_channels
        self.stem = nn.Conv2d(num_frames * raster_channels, channels, 3, padding=1)
        self.blocks = nn.Sequential(*[ResidualConvBlock(channels) for _ in range(num_blocks)])

    def forward(self, rasters: torch.Tensor) -> torch.Tensor:
        b, t, c, h, w = rasters.shape
        if t != self.num_frames or c != self.raster_channels:
            raise ValueError(
                f"expected (B, {self.num_frames}, {self.raster_channels}, H, W) input, "
                f"got {tuple(rasters.shape)}"
            )
        x = rasters.reshape(b, t * c, h, w)
        return self.blocks(self.stem(x))
