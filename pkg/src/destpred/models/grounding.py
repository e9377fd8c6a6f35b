"""Referred-object grounding: command vs object-feature dot-product scorer."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..geometry import iou_2d
from ..data.schema import DatasetSplit
from .training import ArrayBatcher, PlateauScale, TrainingError, state_to_numpy


class GroundingError(ValueError):
    pass


@dataclass(frozen=True)
class GroundingConfig:
    command_dim: int = 768
    feature_dim: int = 1538
    hidden: int = 1024

    def to_json(self) -> dict:
        return {
            "command_dim": self.command_dim,
            "feature_dim": self.feature_dim,
            "hidden": self.hidden,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundingConfig":
        return cls(
            command_dim=int(obj["command_dim"]),
            feature_dim=int(obj["feature_dim"]),
            hidden=int(obj["hidden"]),
        )


class GroundingNet(nn.Module):
    kind = "grounding"

    def __init__(self, cfg: GroundingConfig):
        super().__init__()
        self.cfg = cfg
        self.command_mlp = nn.Sequential(
            nn.Linear(cfg.command_dim, cfg.hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.hidden, cfg.hidden),
        )
        self.object_mlp = nn.Sequential(
            nn.Linear(cfg.feature_dim, cfg.hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.hidden, cfg.hidden),
        )

    def forward(
        self, command: torch.Tensor, features: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """Scores per proposal, padding positions forced to -inf.

        command: (B, command_dim); features: (B, P, feature_dim);
        mask: (B, P) with 1 for real proposals.
        """
        if command.shape[-1] != self.cfg.command_dim:
            raise GroundingError(
                f"command dim {command.shape[-1]}, expected {self.cfg.command_dim}"
            )
        if features.shape[-1] != self.cfg.feature_dim:
            raise GroundingError(
                f"feature dim {features.shape[-1]}, expected {self.cfg.feature_dim}"
            )
        q = self.command_mlp(command)  # (B, H)
        k = self.object_mlp(features)  # (B, P, H)
        logits = torch.einsum("bph,bh->bp", k, q)
        return logits.masked_fill(mask <= 0, float("-inf"))


def score_proposals(
    model: GroundingNet, command: np.ndarray, features: np.ndarray
) -> np.ndarray:
    """Softmax probabilities over one record's proposals."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[0] == 0:
        raise GroundingError(f"proposal features must be (P, D) with P >= 1, got {features.shape}")
    cmd = torch.from_numpy(np.asarray(command, dtype=np.float32))[None]
    feats = torch.from_numpy(features)[None]
    mask = torch.ones(1, features.shape[0])
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(cmd, feats, mask)
            probs = torch.softmax(logits, dim=-1)
    finally:
        model.train(was_training)
    return probs[0].cpu().numpy().astype(np.float64)


def proposal_ious(rec) -> np.ndarray:
    if rec.gt_referred_frontal_box is None:
        raise GroundingError(f"record {rec.id} has no GT frontal box")
    out = np.zeros(len(rec.objects))
    for i, obj in enumerate(rec.objects):
        if obj.frontal_box is not None:
            out[i] = iou_2d(obj.frontal_box, rec.gt_referred_frontal_box)
    return out


def grounding_arrays(
    split: DatasetSplit, feature_dim: int, skip_unmatched: bool = True
) -> dict[str, np.ndarray]:
    """Pack a split into padded proposal arrays for training and IoU eval."""
    usable = []
    for rec in split:
        if not rec.objects or rec.gt_referred_frontal_box is None:
            continue
        if any(o.feature is None or o.frontal_box is None for o in rec.objects):
            raise GroundingError(f"record {rec.id}: objects missing features or boxes")
        ious = proposal_ious(rec)
        if ious.max() <= 0.0:
            if not skip_unmatched:
                raise GroundingError(f"record {rec.id}: no proposal overlaps the GT box")
            warnings.warn(f"record {rec.id}: no proposal overlaps the GT box, skipped")
            continue
        usable.append((rec, ious))
    if not usable:
        raise GroundingError(f"split {split.name!r}: no usable grounding records")
    max_p = max(len(rec.objects) for rec, _ in usable)
    n = len(usable)
    feats = np.zeros((n, max_p, feature_dim), dtype=np.float32)
    mask = np.zeros((n, max_p), dtype=np.float32)
    commands = np.zeros((n, usable[0][0].command_embedding.shape[0]), dtype=np.float32)
    targets = np.zeros(n, dtype=np.int64)
    iou_pad = np.zeros((n, max_p), dtype=np.float64)
    for i, (rec, ious) in enumerate(usable):
        p = len(rec.objects)
        for j, obj in enumerate(rec.objects):
            feats[i, j] = obj.feature
        mask[i, :p] = 1.0
        commands[i] = rec.command_embedding
        targets[i] = int(np.argmax(ious))
        iou_pad[i, :p] = ious
    return {
        "command": commands,
        "features": feats,
        "mask": mask,
        "target": targets,
        "ious": iou_pad,
    }


def eval_iou50(score_fn, arrays: dict[str, np.ndarray], threshold: float = 0.5) -> float:
    """Fraction of records whose argmax-scored proposal has IoU > threshold.

    score_fn(command, features, mask) -> logits, all numpy (batched).
    """
    logits = np.asarray(score_fn(arrays["command"], arrays["features"], arrays["mask"]))
    logits = np.where(arrays["mask"] > 0, logits, -np.inf)
    picked = logits.argmax(axis=1)
    ious = arrays["ious"][np.arange(len(picked)), picked]
    return float(np.mean(ious > threshold))


def model_scorer(model: GroundingNet):
    def score(command, features, mask):
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                logits = model(
                    torch.from_numpy(np.asarray(command, dtype=np.float32)),
                    torch.from_numpy(np.asarray(features, dtype=np.float32)),
                    torch.from_numpy(np.asarray(mask, dtype=np.float32)),
                )
        finally:
            model.train(was_training)
        return logits.cpu().numpy()

    return score


@dataclass(frozen=True)
class GroundingTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 1e-4
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    seed: int = 0


@dataclass
class GroundingTrainResult:
    best_state: dict[str, np.ndarray]
    best_val_iou: float
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    lr_drops: list[int] = field(default_factory=list)


def train_grounding(
    model: GroundingNet,
    train_arrays: dict[str, np.ndarray],
    val_arrays: dict[str, np.ndarray],
    cfg: GroundingTrainConfig,
) -> GroundingTrainResult:
    """Cross-entropy against the best-IoU proposal, LR stepped on IoU plateau."""
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = PlateauScale(
        opt, patience=cfg.plateau_patience, factor=cfg.plateau_factor, mode="max"
    )
    batcher = ArrayBatcher(
        {k: train_arrays[k] for k in ("command", "features", "mask", "target")},
        cfg.batch_size,
        cfg.seed,
    )
    best_iou = -math.inf
    best_state = None
    curve = []
    lr_drops = []
    for epoch in range(cfg.epochs):
        model.train()
        tot, n = 0.0, 0
        for batch in batcher.batches(epoch):
            opt.zero_grad()
            logits = model(
                torch.from_numpy(batch["command"]),
                torch.from_numpy(batch["features"]),
                torch.from_numpy(batch["mask"]),
            )
            loss = F.cross_entropy(logits, torch.from_numpy(batch["target"]))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite grounding loss at epoch {epoch}")
            loss.backward()
            opt.step()
            tot += float(loss.detach()) * len(batch["target"])
            n += len(batch["target"])
        val_iou = eval_iou50(model_scorer(model), val_arrays)
        curve.append((epoch, tot / n, val_iou))
        if val_iou > best_iou:
            best_iou = val_iou
            best_state = state_to_numpy(model)
        if scheduler.step(val_iou):
            lr_drops.append(epoch)
    if best_state is None:
        best_state = state_to_numpy(model)
    return GroundingTrainResult(
        best_state=best_state, best_val_iou=best_iou, curve=curve, lr_drops=lr_drops
    )
