"""Trained baselines: SinglePoint, UnimodalNormal, MDN, NonParametric.

All four share the flat layout-vector trunk (layout encoding concatenated
with the command embedding) and differ only in their output heads and loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..geometry import MAP_X_MAX, MAP_X_MIN, MAP_Y_MAX, MAP_Y_MIN, PixelFrame, ego_to_pixel, pixel_to_ego
from ..mixture import Mixture2D
from .density import chol_log_pdf, diag_log_pdf, masked_nll, positive_sigma
from .encoders import LayoutVectorEncoder

BASELINE_KINDS = ("single-point", "unimodal", "mdn", "nonparam")


@dataclass(frozen=True)
class BaselineConfig:
    input_hw: tuple[int, int] = (200, 300)
    base_channels: int = 64
    n_stages: int = 4
    encoder_dim: int = 1024
    hidden: int = 512
    command_dim: int = 768
    in_channels: int = 15
    mdn_components: int = 3
    nonparam_grid_hw: tuple[int, int] = (200, 300)

    def __post_init__(self) -> None:
        PixelFrame.from_hw(self.input_hw)
        PixelFrame.from_hw(self.nonparam_grid_hw)

    @classmethod
    def full(cls) -> "BaselineConfig":
        return cls()

    @classmethod
    def desk(cls) -> "BaselineConfig":
        return cls(input_hw=(96, 144), base_channels=16, n_stages=3)

    def to_json(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "base_channels": self.base_channels,
            "n_stages": self.n_stages,
            "encoder_dim": self.encoder_dim,
            "hidden": self.hidden,
            "command_dim": self.command_dim,
            "in_channels": self.in_channels,
            "mdn_components": self.mdn_components,
            "nonparam_grid_hw": list(self.nonparam_grid_hw),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BaselineConfig":
        return cls(
            input_hw=tuple(obj["input_hw"]),
            base_channels=int(obj["base_channels"]),
            n_stages=int(obj["n_stages"]),
            encoder_dim=int(obj["encoder_dim"]),
            hidden=int(obj["hidden"]),
            command_dim=int(obj["command_dim"]),
            in_channels=int(obj["in_channels"]),
            mdn_components=int(obj["mdn_components"]),
            nonparam_grid_hw=tuple(obj["nonparam_grid_hw"]),
        )


class _Trunk(nn.Module):
    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        self.encoder = LayoutVectorEncoder(
            in_channels=cfg.in_channels,
            base_channels=cfg.base_channels,
            n_stages=cfg.n_stages,
            out_dim=cfg.encoder_dim,
        )
        self.fc = nn.Linear(cfg.encoder_dim + cfg.command_dim, cfg.hidden)

    def forward(self, layout, command):
        enc = self.encoder(layout)
        return torch.relu(self.fc(torch.cat([enc, command], dim=-1)))


class SinglePointNet(nn.Module):
    kind = "single-point"

    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = _Trunk(cfg)
        self.head = nn.Linear(cfg.hidden, 2)

    def forward(self, layout, command):
        return self.head(self.trunk(layout, command))


def single_point_loss(pred: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over batch of the distance to the nearest ground truth."""
    dist = torch.linalg.norm(pred[:, None, :] - targets, dim=-1)  # (B, T)
    dist = torch.where(mask > 0, dist, torch.full_like(dist, torch.inf))
    return dist.min(dim=-1).values.mean()


def clamp_to_map(points: np.ndarray) -> np.ndarray:
    out = np.array(points, dtype=np.float64)
    out[..., 0] = np.clip(out[..., 0], MAP_X_MIN, MAP_X_MAX)
    out[..., 1] = np.clip(out[..., 1], MAP_Y_MIN, MAP_Y_MAX)
    return out


class UnimodalNet(nn.Module):
    kind = "unimodal"

    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = _Trunk(cfg)
        self.head = nn.Linear(cfg.hidden, 4)

    def forward(self, layout, command):
        out = self.head(self.trunk(layout, command))
        means = out[:, None, 0:2]
        sigmas = positive_sigma(out[:, None, 2:4])
        log_weights = torch.zeros_like(out[:, 0:1])
        return means, sigmas, log_weights


class MdnNet(nn.Module):
    kind = "mdn"

    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = _Trunk(cfg)
        self.head = nn.Linear(cfg.hidden, cfg.mdn_components * 6)

    def forward(self, layout, command):
        k = self.cfg.mdn_components
        out = self.head(self.trunk(layout, command)).view(-1, k, 6)
        means = out[..., 0:2]
        l00 = positive_sigma(out[..., 2])
        l10 = out[..., 3]
        l11 = positive_sigma(out[..., 4])
        zeros = torch.zeros_like(l00)
        chol = torch.stack(
            [torch.stack([l00, zeros], dim=-1), torch.stack([l10, l11], dim=-1)], dim=-2
        )  # (B, K, 2, 2)
        logits = out[..., 5]
        return means, chol, logits


def gaussian_nll_loss(model_out, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    means, scales, logits = model_out
    if scales.dim() == 4:
        lp = chol_log_pdf(means, scales, logits, targets)
    else:
        lp = diag_log_pdf(means, scales, logits, targets)
    return masked_nll(lp, mask)


def mdn_to_mixture(means, chol, logits) -> list[Mixture2D]:
    means = means.detach().cpu().numpy().astype(np.float64)
    chol = chol.detach().cpu().numpy().astype(np.float64)
    logits = logits.detach().cpu().numpy().astype(np.float64)
    return [
        Mixture2D(means=means[i], scales=chol[i], log_weights=logits[i])
        for i in range(means.shape[0])
    ]


def unimodal_to_mixture(means, sigmas, log_weights) -> list[Mixture2D]:
    means = means.detach().cpu().numpy().astype(np.float64)
    sigmas = sigmas.detach().cpu().numpy().astype(np.float64)
    lw = log_weights.detach().cpu().numpy().astype(np.float64)
    return [
        Mixture2D(means=means[i], scales=sigmas[i], log_weights=lw[i])
        for i in range(means.shape[0])
    ]


@dataclass(frozen=True)
class SoftTargetConfig:
    grid_hw: tuple[int, int] = (200, 300)
    sigma: float = 3.0
    t_sigma: int = 11


def destination_cells(points_m: np.ndarray, grid_hw: tuple[int, int]) -> np.ndarray:
    """Integer (u_cell, v_cell) per point on the given grid."""
    frame = PixelFrame.from_hw(grid_hw)
    px = ego_to_pixel(np.asarray(points_m, dtype=np.float64), frame)
    h, w = grid_hw
    cells = np.floor(px).astype(np.int64)
    cells[:, 0] = np.clip(cells[:, 0], 0, w - 1)
    cells[:, 1] = np.clip(cells[:, 1], 0, h - 1)
    return cells


def _axis_targets(indices: np.ndarray, n: int, cfg: SoftTargetConfig) -> np.ndarray:
    t = np.zeros(n, dtype=np.float64)
    i = np.arange(n)
    for j in indices:
        d = np.abs(i - int(j))
        contrib = np.exp(-((i - int(j)) ** 2) / (2.0 * cfg.sigma**2))
        contrib[d > cfg.t_sigma] = 0.0
        t += contrib
    total = t.sum()
    if total <= 0:
        raise ValueError("soft target vector summed to zero")
    return t / total


def nonparam_soft_targets(
    points_m: np.ndarray, cfg: SoftTargetConfig = SoftTargetConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis truncated-Gaussian targets: (u over W cells, v over H cells)."""
    points_m = np.asarray(points_m, dtype=np.float64)
    if points_m.size == 0:
        raise ValueError("no ground-truth destinations for soft targets")
    cells = destination_cells(points_m, cfg.grid_hw)
    h, w = cfg.grid_hw
    return _axis_targets(cells[:, 0], w, cfg), _axis_targets(cells[:, 1], h, cfg)


class NonParamNet(nn.Module):
    kind = "nonparam"

    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = _Trunk(cfg)
        h, w = cfg.nonparam_grid_hw
        self.head_u = nn.Linear(cfg.hidden, w)
        self.head_v = nn.Linear(cfg.hidden, h)

    def forward(self, layout, command):
        z = self.trunk(layout, command)
        return self.head_u(z), self.head_v(z)


def nonparam_kl_loss(logits_u, logits_v, targets_u, targets_v) -> torch.Tensor:
    """KL(target || prediction) per axis, summed over axes, mean over batch."""
    kl = 0.0
    for logits, target in ((logits_u, targets_u), (logits_v, targets_v)):
        logp = torch.log_softmax(logits, dim=-1)
        safe_log_t = torch.where(target > 0, torch.log(target.clamp_min(1e-300)), torch.zeros_like(target))
        kl = kl + (target * (safe_log_t - logp)).sum(dim=-1)
    return kl.mean()


def nonparam_sample(
    logits_u: np.ndarray, logits_v: np.ndarray, n: int, rng: np.random.Generator,
    grid_hw: tuple[int, int] = (200, 300),
) -> np.ndarray:
    """Draw destinations by sampling each axis independently, cell centers."""

    def _probs(logits):
        z = logits - logits.max()
        e = np.exp(z)
        return e / e.sum()

    pu = _probs(np.asarray(logits_u, dtype=np.float64))
    pv = _probs(np.asarray(logits_v, dtype=np.float64))
    u = rng.choice(len(pu), size=n, p=pu) + 0.5
    v = rng.choice(len(pv), size=n, p=pv) + 0.5
    frame = PixelFrame.from_hw(grid_hw)
    return pixel_to_ego(np.stack([u, v], axis=-1), frame)


def build_baseline(kind: str, cfg: BaselineConfig) -> nn.Module:
    table = {
        "single-point": SinglePointNet,
        "unimodal": UnimodalNet,
        "mdn": MdnNet,
        "nonparam": NonParamNet,
    }
    if kind not in table:
        raise ValueError(f"unknown baseline kind {kind!r}, expected one of {BASELINE_KINDS}")
    return table[kind](cfg)
