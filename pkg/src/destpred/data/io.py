"""JSON-Lines dataset persistence.

One `{split}.jsonl` file per split, one record per line. Object feature
vectors live in a side-car `{split}_features.npz` keyed by record id, so the
JSON stays readable. Generator-truth mixtures use `{split}_truth.jsonl`.
"""

from __future__ import annotations

import io
import json
import warnings
import zipfile
from pathlib import Path

import numpy as np

from ..geometry import FootprintBox
from ..mixture import Mixture2D
from .schema import (
    CurvedRoad,
    DatasetSplit,
    Intent,
    PngRoad,
    SceneObject,
    SceneRecord,
    SchemaError,
    StraightRoad,
)
from .synthetic import GeneratorTruth


class DatasetIOError(ValueError):
    pass


def write_npz_deterministic(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """npz writer with a pinned zip timestamp, so repeat runs are bit-identical."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def _road_to_json(road) -> dict:
    if isinstance(road, StraightRoad):
        return {
            "kind": "straight",
            "center_y": road.center_y,
            "width": road.width,
            "marking": road.marking,
        }
    if isinstance(road, CurvedRoad):
        return {
            "kind": "curved",
            "center_y": road.center_y,
            "curvature": road.curvature,
            "width": road.width,
            "marking": road.marking,
        }
    if isinstance(road, PngRoad):
        return {"kind": "png", "path": road.path}
    raise DatasetIOError(f"unknown road type {type(road).__name__}")


def _road_from_json(obj: dict):
    kind = obj.get("kind")
    if kind == "straight":
        return StraightRoad(
            center_y=float(obj["center_y"]),
            width=float(obj["width"]),
            marking=bool(obj.get("marking", True)),
        )
    if kind == "curved":
        return CurvedRoad(
            center_y=float(obj["center_y"]),
            curvature=float(obj["curvature"]),
            width=float(obj["width"]),
            marking=bool(obj.get("marking", True)),
        )
    if kind == "png":
        return PngRoad(path=str(obj["path"]))
    raise DatasetIOError(f"unknown road kind {kind!r}")


def _box_to_json(box: FootprintBox) -> dict:
    return {
        "center": [float(box.center[0]), float(box.center[1])],
        "length": float(box.length),
        "width": float(box.width),
        "yaw": float(box.yaw),
        "class": box.class_label,
    }


def _box_from_json(obj: dict) -> FootprintBox:
    return FootprintBox(
        center=np.asarray(obj["center"], dtype=np.float64),
        length=float(obj["length"]),
        width=float(obj["width"]),
        yaw=float(obj["yaw"]),
        class_label=str(obj["class"]),
    )


def record_to_json(rec: SceneRecord) -> dict:
    objects = []
    for obj in rec.objects:
        entry = _box_to_json(obj.box)
        if obj.frontal_box is not None:
            entry["frontal_box"] = [float(v) for v in obj.frontal_box]
        objects.append(entry)
    out = {
        "id": rec.id,
        "road": _road_to_json(rec.road),
        "ego": _box_to_json(rec.ego_box),
        "objects": objects,
        "command_embedding": [float(v) for v in np.asarray(rec.command_embedding)],
        "destinations": [[float(d[0]), float(d[1])] for d in rec.destinations],
        "intent": rec.intent.value,
    }
    if rec.referred_index is not None:
        out["referred_index"] = rec.referred_index
    if rec.gt_referred_frontal_box is not None:
        out["gt_referred_frontal_box"] = [float(v) for v in rec.gt_referred_frontal_box]
    if rec.features_file is not None:
        out["features_file"] = rec.features_file
    return out


def record_from_json(obj: dict) -> SceneRecord:
    objects = []
    for entry in obj.get("objects", []):
        fb = entry.get("frontal_box")
        objects.append(
            SceneObject(
                box=_box_from_json(entry),
                frontal_box=tuple(float(v) for v in fb) if fb is not None else None,
            )
        )
    gt_fb = obj.get("gt_referred_frontal_box")
    rec = SceneRecord(
        id=str(obj["id"]),
        road=_road_from_json(obj["road"]),
        ego_box=_box_from_json(obj["ego"]),
        objects=objects,
        command_embedding=np.asarray(obj["command_embedding"], dtype=np.float32),
        destinations=[np.asarray(d, dtype=np.float64) for d in obj["destinations"]],
        intent=Intent.parse(obj["intent"]),
        referred_index=obj.get("referred_index"),
        gt_referred_frontal_box=tuple(float(v) for v in gt_fb) if gt_fb is not None else None,
        features_file=obj.get("features_file"),
    )
    rec.validate()
    return rec


def save_split(split: DatasetSplit, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features = {}
    features_name = f"{split.name}_features.npz"
    lines = []
    for rec in split:
        feats = [o.feature for o in rec.objects]
        if any(f is not None for f in feats):
            if any(f is None for f in feats):
                raise DatasetIOError(f"record {rec.id}: partial object features")
            features[rec.id] = np.stack(feats).astype(np.float32)
            rec.features_file = features_name
        lines.append(json.dumps(record_to_json(rec)))
    path = out_dir / f"{split.name}.jsonl"
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    if features:
        write_npz_deterministic(out_dir / features_name, features)
    return path


def load_split(path: str | Path, name: str | None = None) -> DatasetSplit:
    path = Path(path)
    if name is None:
        name = path.stem
    records = []
    feature_cache: dict[str, np.lib.npyio.NpzFile] = {}
    text = path.read_text()
    if not text.strip():
        warnings.warn(f"dataset file {path} is empty", stacklevel=2)
        return DatasetSplit(name=name, records=[], root=path.parent)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetIOError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            rec = record_from_json(obj)
        except (SchemaError, KeyError, ValueError) as exc:
            raise DatasetIOError(f"{path}:{lineno}: {exc}") from exc
        if rec.features_file is not None:
            feats_path = path.parent / rec.features_file
            if rec.features_file not in feature_cache:
                if not feats_path.exists():
                    raise DatasetIOError(
                        f"{path}:{lineno}: missing features file {feats_path}"
                    )
                feature_cache[rec.features_file] = np.load(feats_path)
            npz = feature_cache[rec.features_file]
            if rec.id not in npz.files:
                raise DatasetIOError(f"{path}:{lineno}: no features for record {rec.id}")
            feats = npz[rec.id]
            if feats.shape[0] != len(rec.objects):
                raise DatasetIOError(
                    f"{path}:{lineno}: {feats.shape[0]} feature rows for "
                    f"{len(rec.objects)} objects"
                )
            for obj_entry, feat in zip(rec.objects, feats):
                obj_entry.feature = np.asarray(feat, dtype=np.float32)
        records.append(rec)
    return DatasetSplit(name=name, records=records, root=path.parent)


def load_dataset(root: str | Path) -> dict[str, DatasetSplit]:
    root = Path(root)
    splits = {}
    for name in ("train", "val", "test"):
        path = root / f"{name}.jsonl"
        if path.exists():
            splits[name] = load_split(path, name)
    if not splits:
        raise DatasetIOError(f"no train/val/test .jsonl files under {root}")
    return splits


def save_truth(truth: GeneratorTruth, split: DatasetSplit, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{split.name}_truth.jsonl"
    lines = []
    for rec in split:
        mix = truth.mixtures[rec.id]
        lines.append(
            json.dumps(
                {
                    "id": rec.id,
                    "means": mix.means.tolist(),
                    "sigmas": mix.scales.tolist(),
                    "log_weights": mix.log_weights.tolist(),
                }
            )
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def load_truth(path: str | Path) -> GeneratorTruth:
    path = Path(path)
    truth = GeneratorTruth()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            truth.mixtures[str(obj["id"])] = Mixture2D(
                means=np.asarray(obj["means"], dtype=np.float64),
                scales=np.asarray(obj["sigmas"], dtype=np.float64),
                log_weights=np.asarray(obj["log_weights"], dtype=np.float64),
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DatasetIOError(f"{path}:{lineno}: {exc}") from exc
    return truth
