"""Refine-Nets: final-frame refinement and decoded-motion refinement.

FrameRefineNet turns (warped basis, decoded residual) into the final
reconstruction through a multi-scale residual encoder-decoder.  Its
correction branch ends in a zero-initialized conv, so an untrained net
returns exactly clamp(basis + residual, 0, 1).

MotionRefineNet applies the same local-attention residual refinement used
inside the estimator to the decoded flow field (identity at init too).
Both are trained jointly with the compressors, never at coding time, so the
latent streams learn to carry the side information the refiners exploit.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GeometryError
from .motion import FlowRefiner, _conv, _zero_conv


class MotionRefineNet(FlowRefiner):
    """LARB refinement of the decoded motion field."""


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            _conv(channels, channels),
            nn.LeakyReLU(0.1, inplace=True),
            _conv(channels, channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class FrameRefineNet(nn.Module):
    """Three-scale residual encoder-decoder over (basis, residual) planes."""

    def __init__(self, channels: int = 64, blocks_per_scale: int = 2):
        super().__init__()
        self.head = _conv(2, channels)
        self.enc1 = nn.Sequential(*[_ResBlock(channels) for _ in range(blocks_per_scale)])
        self.down1 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.enc2 = nn.Sequential(*[_ResBlock(channels) for _ in range(blocks_per_scale)])
        self.down2 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.mid = nn.Sequential(*[_ResBlock(channels) for _ in range(blocks_per_scale)])
        self.up2 = _conv(channels, channels)
        self.dec2 = _ResBlock(channels)
        self.up1 = _conv(channels, channels)
        self.dec1 = _ResBlock(channels)
        self.tail = _zero_conv(channels, 1)

    def forward(self, basis: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
        if basis.shape != residual.shape:
            raise GeometryError(
                f"basis {tuple(basis.shape)} and residual {tuple(residual.shape)} differ"
            )
        if basis.dim() != 4 or basis.shape[1] != 1:
            raise GeometryError(f"expected (B,1,H,W) planes, got {tuple(basis.shape)}")
        intermediate = basis + residual
        x = self.head(torch.cat([intermediate, residual], dim=1))
        s1 = self.enc1(x)
        s2 = self.enc2(self.down1(F.leaky_relu(s1, 0.1)))
        s3 = self.mid(self.down2(F.leaky_relu(s2, 0.1)))
        u2 = F.interpolate(s3, size=s2.shape[2:], mode="bilinear", align_corners=False)
        d2 = self.dec2(self.up2(u2) + s2)
        u1 = F.interpolate(d2, size=s1.shape[2:], mode="bilinear", align_corners=False)
        d1 = self.dec1(self.up1(u1) + s1)
        return (intermediate + self.tail(d1)).clamp(0.0, 1.0)
