"""Multi-scale spatial mixture predictor.

A feature pyramid over the layout tensor emits one Gaussian mixture component
per grid cell per scale. Cell (w, h) at downsampling rate k anchors its
component at layout pixel (w*k + floor(k/2), h*k + floor(k/2)); the network
predicts an offset from that anchor, a per-axis standard deviation, and a
weight logit. All components across scales form one joint softmax mixture.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..geometry import PixelFrame
from ..mixture import Mixture2D
from .density import diag_log_pdf, masked_nll, positive_sigma
from .encoders import PyramidEncoder, group_norm


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class PyramidConfig:
    input_hw: tuple[int, int] = (192, 288)
    strides: tuple[int, ...] = (4, 8, 16, 32)
    fpn_channels: int = 256
    base_channels: int = 64
    n_shared_blocks: int = 5
    attend_after: int = 2
    in_channels: int = 15
    command_dim: int = 768
    command_hidden: int = 512

    def __post_init__(self) -> None:
        PixelFrame.from_hw(self.input_hw)  # validates aspect ratio
        h, w = self.input_hw
        for s in self.strides:
            if h % s or w % s:
                raise ValueError(f"input {h}x{w} not divisible by stride {s}")
        if not 1 <= self.attend_after <= self.n_shared_blocks:
            raise ValueError(
                f"attend_after {self.attend_after} outside 1..{self.n_shared_blocks}"
            )

    @classmethod
    def full(cls) -> "PyramidConfig":
        return cls()

    @classmethod
    def desk(cls) -> "PyramidConfig":
        return cls(input_hw=(96, 144), strides=(4, 8), fpn_channels=64, base_channels=16)

    @classmethod
    def audit(cls) -> "PyramidConfig":
        return cls(input_hw=(24, 36), strides=(2, 4), fpn_channels=8, base_channels=8)

    def grid_shapes(self) -> list[tuple[int, int]]:
        h, w = self.input_hw
        return [(h // s, w // s) for s in self.strides]

    def n_components(self) -> int:
        return sum(gh * gw for gh, gw in self.grid_shapes())

    def to_json(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "strides": list(self.strides),
            "fpn_channels": self.fpn_channels,
            "base_channels": self.base_channels,
            "n_shared_blocks": self.n_shared_blocks,
            "attend_after": self.attend_after,
            "in_channels": self.in_channels,
            "command_dim": self.command_dim,
            "command_hidden": self.command_hidden,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PyramidConfig":
        return cls(
            input_hw=tuple(obj["input_hw"]),
            strides=tuple(obj["strides"]),
            fpn_channels=int(obj["fpn_channels"]),
            base_channels=int(obj["base_channels"]),
            n_shared_blocks=int(obj["n_shared_blocks"]),
            attend_after=int(obj["attend_after"]),
            in_channels=int(obj["in_channels"]),
            command_dim=int(obj["command_dim"]),
            command_hidden=int(obj["command_hidden"]),
        )


def cell_anchors(stride: int, grid_hw: tuple[int, int]) -> np.ndarray:
    """Layout-pixel anchor (u, v) per cell, row-major over (h, w)."""
    gh, gw = grid_hw
    half = stride // 2
    u = np.arange(gw) * stride + half
    v = np.arange(gh) * stride + half
    uu, vv = np.meshgrid(u, v)  # (gh, gw)
    return np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)


@dataclass
class PdpcOutput:
    """Raw mixture parameters in layout-pixel units."""

    means_px: torch.Tensor  # (B, K, 2) as (u, v)
    sigmas_px: torch.Tensor  # (B, K, 2)
    logits: torch.Tensor  # (B, K)
    config: PyramidConfig = field(repr=False, default=None)


class PyramidMixtureNet(nn.Module):
    def __init__(self, cfg: PyramidConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.fpn_channels
        self.encoder = PyramidEncoder(
            in_channels=cfg.in_channels,
            base_channels=cfg.base_channels,
            strides=cfg.strides,
            fpn_channels=c,
        )
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(c, c, 3, padding=1),
                group_norm(c),
                nn.ReLU(inplace=True),
            )
            for _ in range(cfg.n_shared_blocks)
        )
        self.command_mlp = nn.Sequential(
            nn.Linear(cfg.command_dim, cfg.command_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.command_hidden, c),
        )
        self.offset_head = nn.Conv2d(c, 2, 3, padding=1)
        self.sigma_head = nn.Conv2d(c, 2, 3, padding=1)
        self.weight_head = nn.Conv2d(c, 1, 3, padding=1)
        self.scale_gain = nn.Parameter(torch.ones(len(cfg.strides)))
        for si, (stride, grid) in enumerate(zip(cfg.strides, cfg.grid_shapes())):
            anchors = torch.from_numpy(cell_anchors(stride, grid)).float()
            self.register_buffer(f"anchors_{si}", anchors)

    def _check_scale_gain(self) -> None:
        if (self.scale_gain <= 0).any():
            bad = self.scale_gain.detach().tolist()
            if self.training:
                warnings.warn(f"non-positive per-scale sigma gain {bad}", stacklevel=3)
            else:
                raise ModelError(f"non-positive per-scale sigma gain {bad}")

    def forward(self, layout: torch.Tensor, command: torch.Tensor) -> PdpcOutput:
        self._check_scale_gain()
        feats = self.encoder(layout)
        q = self.command_mlp(command)  # (B, C)
        means, sigmas, logits = [], [], []
        for si, feat in enumerate(feats):
            h = feat
            for bi, block in enumerate(self.blocks):
                h = block(h)
                if bi == self.cfg.attend_after - 1:
                    att = torch.einsum("bchw,bc->bhw", h, q)
                    att = att.flatten(1).softmax(dim=-1).view_as(att)
                    h = h * att[:, None, :, :]
            b = h.shape[0]
            off = self.offset_head(h).permute(0, 2, 3, 1).reshape(b, -1, 2)
            anchors = getattr(self, f"anchors_{si}")
            means.append(anchors[None] + off)
            sig = positive_sigma(self.sigma_head(h)).permute(0, 2, 3, 1).reshape(b, -1, 2)
            sigmas.append(sig * self.scale_gain[si])
            logits.append(self.weight_head(h).reshape(b, -1))
        return PdpcOutput(
            means_px=torch.cat(means, dim=1),
            sigmas_px=torch.cat(sigmas, dim=1),
            logits=torch.cat(logits, dim=1),
            config=self.cfg,
        )


def output_to_meters(out: PdpcOutput) -> tuple[torch.Tensor, torch.Tensor]:
    """Mixture means/sigmas converted from layout pixels to the ego frame."""
    frame = PixelFrame.from_hw(out.config.input_hw)
    s = frame.scale
    mean_x = out.means_px[..., 0] / s - 7.0
    mean_y = (frame.height / 2.0 - out.means_px[..., 1]) / s
    means_m = torch.stack([mean_x, mean_y], dim=-1)
    sigmas_m = out.sigmas_px / s
    return means_m, sigmas_m


def pdpc_loss(out: PdpcOutput, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked mixture NLL of ego-frame targets, Eq.-style mean over annotators."""
    means_m, sigmas_m = output_to_meters(out)
    lp = diag_log_pdf(means_m, sigmas_m, out.logits, targets)
    return masked_nll(lp, mask)


def predict_mixtures(
    model: PyramidMixtureNet, layouts: torch.Tensor, commands: torch.Tensor
) -> list[Mixture2D]:
    """Batch inference to ego-frame mixtures."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(layouts, commands)
            means_m, sigmas_m = output_to_meters(out)
    finally:
        model.train(was_training)
    means = means_m.cpu().numpy().astype(np.float64)
    sigmas = sigmas_m.cpu().numpy().astype(np.float64)
    logits = out.logits.cpu().numpy().astype(np.float64)
    return [
        Mixture2D(means=means[i], scales=sigmas[i], log_weights=logits[i])
        for i in range(means.shape[0])
    ]
