"""Temporal feature integrator.

Runs a causal window of raw frames through a 3D-conv temporal branch and
merges it stage by stage with the per-frame feature pyramid:

- temporal branch: 3D stem at stage-1 stride, then one temporal block per
  stage (three residual 3D convolutions each), with strided 3D transitions
  matching the pyramid's spatial strides; temporal stride is 1 throughout.
- integration branch: per stage, the previous integrated output (spatially
  aligned by a strided conv) is added to the pyramid stage, fused with the
  current-frame temporal slice by a 1x1 conv, and refined by a 3x3 conv.
- the fused current-frame slice is written back into the temporal stream
  before it feeds the next stage.

The window covers the most recent ``window`` frames ending at the current
frame; shorter inputs at sequence start are replicate-padded in front.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import NUM_STAGES, STAGE_CHANNELS, FeaturePyramid


@dataclass
class IntegratedFeatures:
    """Per-stage spatiotemporal features; stage l matches the pyramid stage
    l shape. The final stage is the frame embedding consumed downstream."""

    stages: list[torch.Tensor]

    def __getitem__(self, l: int) -> torch.Tensor:
        return self.stages[l]

    @property
    def final(self) -> torch.Tensor:
        return self.stages[-1]


def _pad_temporal(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Replicate-pad the temporal axis of [b, c, t, h, w]."""
    return F.pad(x, (0, 0, 0, 0, pad, pad), mode="replicate")


class TemporalBlock(nn.Module):
    """Three residual 3D convolutions: x_i = x_{i-1} + conv_i(x_{i-1}).

    Kernels are 3x3x3 with replicate padding on the temporal axis, so the
    block preserves shape for any temporal length >= 1.
    """

    def __init__(self, channels: int, num_convs: int = 3):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv3d(channels, channels, 3, padding=(0, 1, 1)) for _ in range(num_convs)
        )

    def forward(self, x: torch.Tensor, return_iterates: bool = False):
        iterates = [x]
        for conv in self.convs:
            x = x + conv(_pad_temporal(x, 1))
            iterates.append(x)
        if return_iterates:
            return x, iterates
        return x


class SpatialToTemporalFusion(nn.Module):
    """Overwrite the last temporal slice with a 1x1-conv fusion of
    [last temporal slice ; current integrated features]."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, integ: torch.Tensor, temp: torch.Tensor) -> torch.Tensor:
        # integ: [b, c, h, w], temp: [b, c, t, h, w]
        fused = self.proj(torch.cat([temp[:, :, -1], integ], dim=1))
        return torch.cat([temp[:, :, :-1], fused.unsqueeze(2)], dim=2)


class TemporalToSpatialFusion(nn.Module):
    """1x1-conv fusion of [current integrated features ; last temporal
    slice] back to the stage channel count."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, integ: torch.Tensor, temp: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([integ, temp[:, :, -1]], dim=1))


def _norm3d(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups=min(8, channels), num_channels=channels)


class TemporalFeatureIntegrator(nn.Module):
    def __init__(self, in_channels: int = 3, window: int = 4):
        super().__init__()
        self.window = window
        c = STAGE_CHANNELS
        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, c[0], (3, 7, 7), stride=(1, 4, 4), padding=(1, 3, 3)),
            _norm3d(c[0]),
            nn.ReLU(inplace=True),
        )
        self.transitions = nn.ModuleList(
            nn.Sequential(
                nn.Conv3d(c[l - 1], c[l], (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)),
                _norm3d(c[l]),
                nn.ReLU(inplace=True),
            )
            for l in range(1, NUM_STAGES)
        )
        self.temporal_blocks = nn.ModuleList(TemporalBlock(ch) for ch in c)
        self.st_fuse = nn.ModuleList(SpatialToTemporalFusion(ch) for ch in c)
        self.ts_fuse = nn.ModuleList(TemporalToSpatialFusion(ch) for ch in c)
        self.refine = nn.ModuleList(nn.Conv2d(ch, ch, 3, padding=1) for ch in c)
        # Aligns the previous integrated stage to the next stage's stride/width.
        self.integ_proj = nn.ModuleList(
            nn.Conv2d(c[l - 1], c[l], 3, stride=2, padding=1) for l in range(1, NUM_STAGES)
        )

    def forward(self, window_frames: torch.Tensor, pyramid: FeaturePyramid) -> IntegratedFeatures:
        """window_frames: [t, c, h, w] with t <= self.window, last frame
        current; pyramid: encoder output for that current frame."""
        if window_frames.ndim != 4:
            raise ValueError(f"window must be [t, c, h, w], got {tuple(window_frames.shape)}")
        t = window_frames.shape[0]
        if t > self.window:
            raise ValueError(f"window of {t} frames exceeds configured length {self.window}")
        if t < self.window:  # replicate the first frame at sequence start
            pad = window_frames[:1].expand(self.window - t, -1, -1, -1)
            window_frames = torch.cat([pad, window_frames], dim=0)

        x = window_frames.permute(1, 0, 2, 3).unsqueeze(0)  # [1, c, t, h, w]
        x = self.stem(x)
        integ_prev = None
        outs = []
        for l in range(NUM_STAGES):
            if l > 0:
                x = self.transitions[l - 1](x)
            temp = self.temporal_blocks[l](x)
            stage = pyramid[l].unsqueeze(0)
            integ = stage if integ_prev is None else self.integ_proj[l - 1](integ_prev) + stage
            out = self.refine[l](self.ts_fuse[l](integ, temp))
            x = self.st_fuse[l](integ, temp)
            integ_prev = out
            outs.append(out.squeeze(0))
        return IntegratedFeatures(stages=outs)
