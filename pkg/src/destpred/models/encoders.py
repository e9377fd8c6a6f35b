"""Convolutional encoders: a residual feature pyramid and a flat vector trunk."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 32), channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = group_norm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                group_norm(out_ch),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.skip(x))


class PyramidEncoder(nn.Module):
    """Residual ladder with a top-down pathway (FPN).

    The ladder downsamples by 2 per stage starting from a stride-2 stem, with
    basic residual blocks and doubling widths, and lateral+top-down fusion
    produces fpn_channels-wide maps at each requested stride. Strides must be
    powers of two and divide the input dims.
    """

    def __init__(
        self,
        in_channels: int = 15,
        base_channels: int = 64,
        strides: tuple[int, ...] = (4, 8, 16, 32),
        fpn_channels: int = 256,
        blocks_per_stage: int = 2,
    ):
        super().__init__()
        if not strides or sorted(strides) != list(strides):
            raise ValueError(f"strides must be ascending and nonempty, got {strides}")
        for s in strides:
            if s < 2 or (s & (s - 1)) != 0:
                raise ValueError(f"stride {s} is not a power of two >= 2")
        self.strides = tuple(strides)
        max_level = int(math.log2(max(strides)))
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base_channels, 7, stride=2, padding=3, bias=False),
            group_norm(base_channels),
            nn.ReLU(inplace=True),
        )
        stages = []
        ch = base_channels
        self._level_channels = {1: base_channels}
        for level in range(2, max_level + 1):
            out_ch = min(base_channels * (2 ** (level - 2)), base_channels * 8)
            blocks = [ResidualBlock(ch, out_ch, stride=2)]
            blocks += [ResidualBlock(out_ch, out_ch) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            ch = out_ch
            self._level_channels[level] = out_ch
        self.stages = nn.ModuleList(stages)
        self._out_levels = [int(math.log2(s)) for s in strides]
        self.laterals = nn.ModuleDict(
            {
                str(level): nn.Conv2d(self._level_channels[level], fpn_channels, 1)
                for level in self._out_levels
            }
        )
        self.smooth = nn.ModuleDict(
            {
                str(level): nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1)
                for level in self._out_levels
            }
        )
        self.fpn_channels = fpn_channels

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Returns one (B, fpn_channels, H/s, W/s) map per configured stride."""
        feats = {}
        out = self.stem(x)
        feats[1] = out
        for i, stage in enumerate(self.stages):
            out = stage(out)
            feats[2 + i] = out
        merged = {}
        prev = None
        for level in sorted(self._out_levels, reverse=True):
            lat = self.laterals[str(level)](feats[level])
            if prev is not None:
                lat = lat + F.interpolate(prev, size=lat.shape[-2:], mode="nearest")
            prev = lat
            merged[level] = self.smooth[str(level)](lat)
        return [merged[int(math.log2(s))] for s in self.strides]


class LayoutVectorEncoder(nn.Module):
    """Layout tensor to a flat 1024-d vector (baseline trunk)."""

    def __init__(
        self,
        in_channels: int = 15,
        base_channels: int = 64,
        n_stages: int = 4,
        out_dim: int = 1024,
        blocks_per_stage: int = 2,
    ):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base_channels, 7, stride=2, padding=3, bias=False),
            group_norm(base_channels),
            nn.ReLU(inplace=True),
        )
        stages = []
        ch = base_channels
        for i in range(n_stages):
            out_ch = min(base_channels * (2**i), base_channels * 8)
            blocks = [ResidualBlock(ch, out_ch, stride=2)]
            blocks += [ResidualBlock(out_ch, out_ch) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(ch, out_dim)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.stages(self.stem(x))
        out = out.mean(dim=(2, 3))
        return self.fc(out)
