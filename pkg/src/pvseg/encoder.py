"""Small hierarchical image encoder.

A stride-4 convolutional stem followed by four stages of residual conv blocks
produces a 4-level feature pyramid at strides (4, 8, 16, 32) with channels
(32, 64, 128, 256).  The encoder is trained jointly with the rest of the
model; there are no frozen pretrained weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

STAGE_CHANNELS = (32, 64, 128, 256)
STAGE_STRIDES = (4, 8, 16, 32)
NUM_STAGES = 4


@dataclass
class FeaturePyramid:
    """Per-stage features, stage l of shape [c_l, h/stride_l, w/stride_l]."""

    stages: list[torch.Tensor]

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stages, got {len(self.stages)}")

    def __getitem__(self, l: int) -> torch.Tensor:
        return self.stages[l]


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups=min(8, channels), num_channels=channels)


class ResidualConvBlock(nn.Module):
    """conv-norm-relu-conv-norm with an identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(x + y)


class EncoderStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, downsample: bool):
        super().__init__()
        if downsample:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), _norm(out_ch), nn.ReLU(inplace=True)
            )
        else:
            self.down = nn.Identity()
        self.blocks = nn.Sequential(ResidualConvBlock(out_ch), ResidualConvBlock(out_ch))

    def forward(self, x):
        return self.blocks(self.down(x))


class ImageEncoder(nn.Module):
    """Maps a frame [c, h, w] (h, w divisible by 32) to a FeaturePyramid."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        c1 = STAGE_CHANNELS[0]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c1, 7, stride=4, padding=3), _norm(c1), nn.ReLU(inplace=True)
        )
        stages = []
        prev = c1
        for l, ch in enumerate(STAGE_CHANNELS):
            stages.append(EncoderStage(prev, ch, downsample=l > 0))
            prev = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, frame: torch.Tensor) -> FeaturePyramid:
        if frame.ndim != 3:
            raise ValueError(f"frame must be [c, h, w], got shape {tuple(frame.shape)}")
        _, h, w = frame.shape
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"frame size {h}x{w} must be divisible by 32")
        x = self.stem(frame.unsqueeze(0))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x.squeeze(0))
        return FeaturePyramid(stages=feats)
