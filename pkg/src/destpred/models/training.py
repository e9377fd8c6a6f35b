"""Seeded, single-process training loop shared by every trained model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 3e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    clip_norm: float | None = 5.0
    early_stop_patience: int | None = None
    seed: int = 0
    divergence_factor: float = 1e3


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_val: float
    final_epoch: int
    curve: list[tuple[int, float, float | None]] = field(default_factory=list)

    def write_curve_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["epoch,train_loss,val_loss"]
        for epoch, train, val in self.curve:
            lines.append(f"{epoch},{train:.6f},{'' if val is None else f'{val:.6f}'}")
        path.write_text("\n".join(lines) + "\n")
        return path


class ArrayBatcher:
    """Yields aligned mini-batch slices of named arrays, seeded per epoch."""

    def __init__(self, arrays: dict[str, np.ndarray], batch_size: int, seed: int, shuffle: bool = True):
        sizes = {k: len(v) for k, v in arrays.items()}
        if len(set(sizes.values())) != 1:
            raise ValueError(f"mismatched array lengths {sizes}")
        self.arrays = arrays
        self.n = next(iter(sizes.values()))
        if self.n == 0:
            raise ValueError("empty dataset")
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle

    def batches(self, epoch: int):
        if self.shuffle:
            seq = np.random.SeedSequence(self.seed, spawn_key=(epoch,))
            order = np.random.Generator(np.random.PCG64(seq)).permutation(self.n)
        else:
            order = np.arange(self.n)
        for start in range(0, self.n, self.batch_size):
            idx = order[start : start + self.batch_size]
            yield {k: v[idx] for k, v in self.arrays.items()}


def state_to_numpy(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32, copy=True) for k, v in model.state_dict().items()}


def load_numpy_state(model: nn.Module, params: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in params.items()}
    model.load_state_dict(state, strict=True)


class PlateauScale:
    """Multiplies the LR when a monitored rate stops improving.

    step() returns True on epochs where the factor fires, so schedules can be
    verified against a scripted trace.
    """

    def __init__(self, optimizer=None, patience: int = 3, factor: float = 0.1, mode: str = "max"):
        if mode not in ("max", "min"):
            raise ValueError(f"mode {mode!r}")
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.mode = mode
        self.best: float | None = None
        self.wait = 0

    def step(self, value: float) -> bool:
        improved = (
            self.best is None
            or (self.mode == "max" and value > self.best)
            or (self.mode == "min" and value < self.best)
        )
        if improved:
            self.best = value
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            if self.optimizer is not None:
                for group in self.optimizer.param_groups:
                    group["lr"] *= self.factor
            return True
        return False


def _run_validation(model, loss_fn, batcher: ArrayBatcher | None) -> float | None:
    if batcher is None:
        return None
    model.eval()
    tot, n = 0.0, 0
    with torch.no_grad():
        for batch in batcher.batches(0):
            loss = loss_fn(model, batch)
            bs = len(next(iter(batch.values())))
            tot += float(loss.detach()) * bs
            n += bs
    return tot / n


def train_model(
    model: nn.Module,
    loss_fn,
    train_arrays: dict[str, np.ndarray],
    cfg: TrainConfig,
    val_arrays: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Adam + gradient clipping + best-validation tracking.

    loss_fn(model, batch_of_numpy_arrays) -> scalar tensor. Runs on whatever
    device the model already sits on; everything here is CPU-deterministic
    given fixed seeds and thread count.
    """
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    batcher = ArrayBatcher(train_arrays, cfg.batch_size, cfg.seed, shuffle=True)
    val_batcher = (
        ArrayBatcher(val_arrays, cfg.batch_size, cfg.seed, shuffle=False)
        if val_arrays is not None
        else None
    )
    best_val = math.inf
    best_state: dict[str, np.ndarray] | None = None
    wait = 0
    initial_train: float | None = None
    curve: list[tuple[int, float, float | None]] = []
    final_epoch = 0
    for epoch in range(cfg.epochs):
        model.train()
        tot, n = 0.0, 0
        for batch_idx, batch in enumerate(batcher.batches(epoch)):
            opt.zero_grad()
            loss = loss_fn(model, batch)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {float(loss.detach())} at epoch {epoch} batch {batch_idx}"
                )
            loss.backward()
            if cfg.clip_norm is not None:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            bs = len(next(iter(batch.values())))
            tot += float(loss.detach()) * bs
            n += bs
        train_loss = tot / n
        if initial_train is None:
            initial_train = train_loss
        elif train_loss > cfg.divergence_factor * (abs(initial_train) + 1.0):
            raise TrainingError(
                f"training diverged: epoch {epoch} loss {train_loss:.4g} vs "
                f"initial {initial_train:.4g}"
            )
        val_loss = _run_validation(model, loss_fn, val_batcher)
        curve.append((epoch, train_loss, val_loss))
        final_epoch = epoch
        monitored = val_loss if val_loss is not None else train_loss
        if monitored < best_val:
            best_val = monitored
            best_state = state_to_numpy(model)
            wait = 0
        else:
            wait += 1
            if cfg.early_stop_patience is not None and wait >= cfg.early_stop_patience:
                break
    if best_state is None:
        best_state = state_to_numpy(model)
    return TrainResult(
        best_state=best_state, best_val=best_val, final_epoch=final_epoch, curve=curve
    )
