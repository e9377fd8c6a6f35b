"""Dataset-to-model plumbing: array packing, training runs, checkpoint I/O,
and batched split prediction for every model kind."""

from __future__ import annotations

import copy
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .data.checkpoint import Checkpoint, CheckpointError
from .data.schema import MAX_DESTINATIONS, DatasetSplit
from .layout import layout_from_uint8, rasterize_scene, rasterize_split
from .mixture import Mixture2D
from .models.baselines import (
    BaselineConfig,
    SoftTargetConfig,
    build_baseline,
    clamp_to_map,
    gaussian_nll_loss,
    mdn_to_mixture,
    nonparam_kl_loss,
    nonparam_soft_targets,
    single_point_loss,
    unimodal_to_mixture,
)
from .models.grounding import (
    GroundingConfig,
    GroundingNet,
    GroundingTrainConfig,
    grounding_arrays,
    model_scorer,
    train_grounding,
)
from .models.pyramid import PyramidConfig, PyramidMixtureNet, pdpc_loss, predict_mixtures
from .models.training import (
    ArrayBatcher,
    TrainConfig,
    TrainResult,
    _run_validation,
    load_numpy_state,
    train_model,
)

MODEL_KINDS = ("pdpc", "single-point", "unimodal", "mdn", "nonparam", "grounding")


def split_training_arrays(
    split: DatasetSplit,
    dims_hw: tuple[int, int],
    no_ref: bool = False,
    root: Path | None = None,
) -> dict[str, np.ndarray]:
    """Rasters (uint8), command embeddings, and padded destination targets."""
    n = len(split)
    layouts = rasterize_split(split, dims_hw, no_ref=no_ref, root=root)
    commands = np.stack([rec.command_embedding for rec in split]).astype(np.float32)
    targets = np.zeros((n, MAX_DESTINATIONS, 2), dtype=np.float32)
    mask = np.zeros((n, MAX_DESTINATIONS), dtype=np.float32)
    for i, rec in enumerate(split):
        dests = rec.destination_array()
        targets[i, : len(dests)] = dests
        mask[i, : len(dests)] = 1.0
    return {"layout": layouts, "command": commands, "targets": targets, "mask": mask}


def _to_torch(batch: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    out = {}
    for key, arr in batch.items():
        if key == "layout":
            out[key] = torch.from_numpy(layout_from_uint8(arr))
        else:
            out[key] = torch.from_numpy(np.ascontiguousarray(arr))
    return out


def _pdpc_batch_loss(model, batch):
    t = _to_torch(batch)
    return pdpc_loss(model(t["layout"], t["command"]), t["targets"], t["mask"])


def train_pdpc(
    splits: dict[str, DatasetSplit],
    model_cfg: PyramidConfig,
    train_cfg: TrainConfig,
    no_ref: bool = False,
    root: Path | None = None,
) -> tuple[Checkpoint, TrainResult]:
    torch.manual_seed(train_cfg.seed)
    model = PyramidMixtureNet(model_cfg)
    train_arrays = split_training_arrays(splits["train"], model_cfg.input_hw, no_ref, root)
    val_arrays = (
        split_training_arrays(splits["val"], model_cfg.input_hw, no_ref, root)
        if "val" in splits
        else None
    )
    result = train_model(model, _pdpc_batch_loss, train_arrays, train_cfg, val_arrays)
    ckpt = Checkpoint(
        model_kind="pdpc",
        config={
            "model": model_cfg.to_json(),
            "train": asdict(train_cfg),
            "no_ref": no_ref,
        },
        params=result.best_state,
        extra={"best_val": result.best_val, "final_epoch": result.final_epoch},
    )
    return ckpt, result


def pdpc_split_nll(
    model: PyramidMixtureNet,
    split: DatasetSplit,
    no_ref: bool = False,
    root: Path | None = None,
    batch_size: int = 16,
) -> float:
    """Mean held-out NLL of the model's mixtures over a split."""
    arrays = split_training_arrays(split, model.cfg.input_hw, no_ref, root)
    batcher = ArrayBatcher(arrays, batch_size, seed=0, shuffle=False)
    return _run_validation(model, _pdpc_batch_loss, batcher)


def _baseline_loss_fn(kind: str):
    if kind == "single-point":

        def fn(model, batch):
            t = _to_torch(batch)
            return single_point_loss(model(t["layout"], t["command"]), t["targets"], t["mask"])

    elif kind in ("unimodal", "mdn"):

        def fn(model, batch):
            t = _to_torch(batch)
            return gaussian_nll_loss(model(t["layout"], t["command"]), t["targets"], t["mask"])

    elif kind == "nonparam":

        def fn(model, batch):
            t = _to_torch(batch)
            logits_u, logits_v = model(t["layout"], t["command"])
            return nonparam_kl_loss(logits_u, logits_v, t["target_u"], t["target_v"])

    else:
        raise ValueError(f"no loss for baseline kind {kind!r}")
    return fn


def default_train_config(kind: str, seed: int = 0) -> TrainConfig:
    """Published training recipe per model kind (full-scale presets)."""
    if kind == "pdpc":
        return TrainConfig(epochs=50, batch_size=32, lr=3e-5, seed=seed)
    if kind == "unimodal":
        return TrainConfig(epochs=50, batch_size=16, lr=1e-4, early_stop_patience=10, seed=seed)
    if kind in ("single-point", "mdn", "nonparam"):
        return TrainConfig(epochs=50, batch_size=16, lr=3e-5, early_stop_patience=10, seed=seed)
    raise ValueError(f"no training defaults for {kind!r}")


def desk_train_config(kind: str, seed: int = 0) -> TrainConfig:
    """Desk-scale recipe: small nets and small data need a far larger LR than
    the full-scale setup to converge inside a CPU-minutes budget."""
    if kind == "pdpc":
        return TrainConfig(
            epochs=30,
            batch_size=8,
            lr=3e-4,
            weight_decay=1e-4,
            early_stop_patience=10,
            seed=seed,
        )
    if kind == "unimodal":
        return TrainConfig(epochs=60, batch_size=16, lr=1e-3, early_stop_patience=15, seed=seed)
    if kind in ("single-point", "mdn", "nonparam"):
        return TrainConfig(epochs=60, batch_size=16, lr=3e-4, early_stop_patience=15, seed=seed)
    raise ValueError(f"no desk training defaults for {kind!r}")


def train_baseline(
    kind: str,
    splits: dict[str, DatasetSplit],
    model_cfg: BaselineConfig,
    train_cfg: TrainConfig,
    root: Path | None = None,
) -> tuple[Checkpoint, TrainResult]:
    torch.manual_seed(train_cfg.seed)
    model = build_baseline(kind, model_cfg)

    def pack(split: DatasetSplit) -> dict[str, np.ndarray]:
        arrays = split_training_arrays(split, model_cfg.input_hw, root=root)
        if kind == "nonparam":
            cfg = SoftTargetConfig(grid_hw=model_cfg.nonparam_grid_hw)
            h, w = cfg.grid_hw
            tu = np.zeros((len(split), w), dtype=np.float32)
            tv = np.zeros((len(split), h), dtype=np.float32)
            for i, rec in enumerate(split):
                u, v = nonparam_soft_targets(rec.destination_array(), cfg)
                tu[i] = u
                tv[i] = v
            arrays["target_u"] = tu
            arrays["target_v"] = tv
        return arrays

    train_arrays = pack(splits["train"])
    val_arrays = pack(splits["val"]) if "val" in splits else None
    result = train_model(model, _baseline_loss_fn(kind), train_arrays, train_cfg, val_arrays)
    ckpt = Checkpoint(
        model_kind=kind,
        config={"model": model_cfg.to_json(), "train": asdict(train_cfg)},
        params=result.best_state,
        extra={"best_val": result.best_val, "final_epoch": result.final_epoch},
    )
    return ckpt, result


def train_grounding_model(
    splits: dict[str, DatasetSplit],
    model_cfg: GroundingConfig,
    train_cfg: GroundingTrainConfig,
) -> tuple[Checkpoint, "object"]:
    torch.manual_seed(train_cfg.seed)
    model = GroundingNet(model_cfg)
    train_arrays = grounding_arrays(splits["train"], model_cfg.feature_dim)
    val_split = splits.get("val", splits["train"])
    val_arrays = grounding_arrays(val_split, model_cfg.feature_dim)
    result = train_grounding(model, train_arrays, val_arrays, train_cfg)
    ckpt = Checkpoint(
        model_kind="grounding",
        config={"model": model_cfg.to_json(), "train": asdict(train_cfg)},
        params=result.best_state,
        extra={"best_val_iou": result.best_val_iou, "lr_drops": result.lr_drops},
    )
    return ckpt, result


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the module named by the checkpoint and load its weights."""
    kind = ckpt.model_kind
    if kind == "pdpc":
        cfg = PyramidConfig.from_json(ckpt.config["model"])
        model = PyramidMixtureNet(cfg)
    elif kind == "grounding":
        cfg = GroundingConfig.from_json(ckpt.config["model"])
        model = GroundingNet(cfg)
    elif kind in ("single-point", "unimodal", "mdn", "nonparam"):
        cfg = BaselineConfig.from_json(ckpt.config["model"])
        model = build_baseline(kind, cfg)
    else:
        raise CheckpointError(f"checkpoint holds unknown model kind {kind!r}")
    load_numpy_state(model, ckpt.params)
    model.eval()
    return model, cfg


def _batched_records(split: DatasetSplit, batch_size: int):
    records = list(split)
    for start in range(0, len(records), batch_size):
        yield records[start : start + batch_size]


def _layout_batch(records, dims_hw, no_ref, root) -> torch.Tensor:
    rasters = np.stack([rasterize_scene(r, dims_hw, no_ref=no_ref, root=root) for r in records])
    # quantize exactly like the uint8 training cache so train and eval see
    # identical input values
    rasters = np.rint(rasters * 255.0) / np.float32(255.0)
    return torch.from_numpy(rasters.astype(np.float32))


def _command_batch(records) -> torch.Tensor:
    return torch.from_numpy(np.stack([r.command_embedding for r in records]).astype(np.float32))


def pdpc_split_mixtures(
    model: PyramidMixtureNet,
    split: DatasetSplit,
    no_ref: bool = False,
    root: Path | None = None,
    batch_size: int = 32,
) -> dict[str, Mixture2D]:
    out: dict[str, Mixture2D] = {}
    dims = model.cfg.input_hw
    for chunk in _batched_records(split, batch_size):
        mixes = predict_mixtures(model, _layout_batch(chunk, dims, no_ref, root), _command_batch(chunk))
        for rec, mix in zip(chunk, mixes):
            out[rec.id] = mix
    return out


def gaussian_baseline_mixtures(
    model, split: DatasetSplit, root: Path | None = None, batch_size: int = 32
) -> dict[str, Mixture2D]:
    out: dict[str, Mixture2D] = {}
    dims = model.cfg.input_hw
    with torch.no_grad():
        for chunk in _batched_records(split, batch_size):
            res = model(_layout_batch(chunk, dims, False, root), _command_batch(chunk))
            mixes = mdn_to_mixture(*res) if model.kind == "mdn" else unimodal_to_mixture(*res)
            for rec, mix in zip(chunk, mixes):
                out[rec.id] = mix
    return out


def single_point_predictions(
    model, split: DatasetSplit, root: Path | None = None, batch_size: int = 32
) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    dims = model.cfg.input_hw
    with torch.no_grad():
        for chunk in _batched_records(split, batch_size):
            pred = model(_layout_batch(chunk, dims, False, root), _command_batch(chunk))
            pred = clamp_to_map(pred.cpu().numpy().astype(np.float64))
            for rec, p in zip(chunk, pred):
                out[rec.id] = p
    return out


def nonparam_split_logits(
    model, split: DatasetSplit, root: Path | None = None, batch_size: int = 32
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    dims = model.cfg.input_hw
    with torch.no_grad():
        for chunk in _batched_records(split, batch_size):
            lu, lv = model(_layout_batch(chunk, dims, False, root), _command_batch(chunk))
            lu = lu.cpu().numpy().astype(np.float64)
            lv = lv.cpu().numpy().astype(np.float64)
            for i, rec in enumerate(chunk):
                out[rec.id] = (lu[i], lv[i])
    return out


def apply_grounding(split: DatasetSplit, model: GroundingNet) -> DatasetSplit:
    """Replace each record's referred_index with the scorer's argmax proposal."""
    score = model_scorer(model)
    records = []
    for rec in split:
        new_rec = rec
        if rec.objects and all(o.feature is not None for o in rec.objects):
            feats = np.stack([o.feature for o in rec.objects])[None]
            mask = np.ones((1, feats.shape[1]), dtype=np.float32)
            logits = score(rec.command_embedding[None], feats, mask)[0]
            new_rec = copy.copy(rec)
            new_rec.referred_index = int(np.argmax(logits))
        records.append(new_rec)
    return DatasetSplit(name=split.name, records=records, root=split.root)
