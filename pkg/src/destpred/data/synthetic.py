"""Procedural scene generator with a known destination law.

Every record is built around one referred object placed on a procedural road.
The ground-truth destination distribution is a two-component diagonal Gaussian
mixture whose parameters are exact functions of the scene:

  mode A: a fixed distance past the referred object, along the road tangent
  mode B: beside the ego car, on the same side as the referred object

The exact per-record mixture is retained (GeneratorTruth), so trained models
can be scored against the generating density itself.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import FootprintBox, in_map_extent
from ..mixture import Mixture2D, log_pdf_many
from .schema import (
    COMMAND_DIM,
    DEFAULT_FEATURE_DIM,
    CurvedRoad,
    DatasetSplit,
    Intent,
    SceneObject,
    SceneRecord,
    StraightRoad,
)

REFERRED_CLASSES = ("car", "truck", "bus", "pedestrian")

SYNTH_INTENTS = (
    Intent.APPROACH,
    Intent.PICK_UP,
    Intent.STOP,
    Intent.PARK,
    Intent.CONTINUE,
    Intent.OVERTAKE,
)

# nominal footprint (length, width) in meters per class
CLASS_DIMS = {
    "car": (4.5, 1.9),
    "truck": (7.5, 2.5),
    "trailer": (10.0, 2.6),
    "bus": (11.0, 2.9),
    "construction_vehicle": (6.0, 2.8),
    "bicycle": (1.8, 0.6),
    "motorcycle": (2.1, 0.8),
    "pedestrian": (0.6, 0.6),
    "traffic_cone": (0.4, 0.4),
    "barrier": (2.0, 0.5),
}

EGO_LENGTH = 4.6
EGO_WIDTH = 1.9

_SPLIT_ORDINAL = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 700
    n_val: int = 100
    n_test: int = 200
    feature_dim: int = DEFAULT_FEATURE_DIM
    sigma: float = 1.5
    mode_weights: tuple[float, float] = (0.65, 0.35)
    forward_offset: float = 6.0
    beside_point: tuple[float, float] = (3.0, 5.0)
    confuser_prob: float = 0.9
    confuser_same_side_prob: float = 0.5
    min_confuser_gap: float = 12.0
    max_confuser_gap: float = 22.0
    max_extra_objects: int = 3
    curved_prob: float = 0.5

    def __post_init__(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one record")
        if self.feature_dim < 3:
            raise ValueError(f"feature_dim {self.feature_dim} too small")
        if not math.isclose(sum(self.mode_weights), 1.0, abs_tol=1e-9):
            raise ValueError(f"mode weights {self.mode_weights} must sum to 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.min_confuser_gap > self.max_confuser_gap:
            raise ValueError("min_confuser_gap exceeds max_confuser_gap")


@dataclass
class GeneratorTruth:
    """Exact generating mixture for each record, keyed by record id."""

    mixtures: dict[str, Mixture2D] = field(default_factory=dict)

    def nll(self, split: DatasetSplit) -> float:
        """Mean over records of the mean negative log density of its GT points."""
        per_record = []
        for rec in split:
            mix = self.mixtures[rec.id]
            logp = log_pdf_many(mix, rec.destination_array())
            per_record.append(-float(np.mean(logp)))
        return float(np.mean(per_record))


def hash_vector(tag: str, dim: int) -> np.ndarray:
    """Unit vector drawn from a PCG64 stream seeded by sha256 of the tag.

    Same tag, same platform or not: same vector. This is the only coupling
    between semantic attributes and the embedding space.
    """
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def command_vector(intent: Intent, referred_class: str, side: str) -> np.ndarray:
    return hash_vector(f"cmd|{intent.value}|{referred_class}|{side}", COMMAND_DIM)


def object_feature(
    cls: str, side: str, center: np.ndarray, rng: np.random.Generator, dim: int
) -> np.ndarray:
    """Feature vector carrying class and lane-side identity plus position.

    The last two entries hold the (scaled) map position, mimicking detector
    features that entangle appearance with geometry.
    """
    core = dim - 2
    v = hash_vector(f"objclass|{cls}", core) + 0.6 * hash_vector(f"objside|{side}", core)
    v = v + 0.15 * rng.standard_normal(core).astype(np.float32)
    out = np.empty(dim, dtype=np.float32)
    out[:core] = v
    out[core] = center[0] / 50.0
    out[core + 1] = center[1] / 20.0
    return out


def frontal_box(center: np.ndarray, length: float) -> tuple[float, float, float, float]:
    """Synthetic frontal-camera box: nearer objects are larger and lower."""
    x = max(float(center[0]), 5.0)
    y = float(center[1])
    size = 2200.0 / x * (0.5 + length / 9.0)
    uc = 640.0 - 14.0 * y
    vc = 300.0 + 900.0 / x
    half = size / 2.0
    x0 = min(max(uc - half, 0.0), 1279.0)
    x1 = min(max(uc + half, x0), 1280.0)
    y0 = min(max(vc - half, 0.0), 719.0)
    y1 = min(max(vc + half, y0), 720.0)
    return (x0, y0, x1, y1)


def _lane_side(road, center: np.ndarray) -> str:
    return "left" if center[1] >= float(road.center_at(center[0])) else "right"


def _vehicle_yaw(road, x: float, rng: np.random.Generator) -> float:
    t = road.tangent_at(x)
    yaw = math.atan2(t[1], t[0]) + rng.normal(0.0, 0.05)
    # wrap into (-pi, pi]
    return math.atan2(math.sin(yaw), math.cos(yaw))


def _make_object(
    road, cls: str, x: float, y: float, rng: np.random.Generator, dim: int
) -> SceneObject:
    length, width = CLASS_DIMS[cls]
    if cls == "pedestrian":
        yaw = float(rng.uniform(-math.pi, math.pi))
        yaw = math.atan2(math.sin(yaw), math.cos(yaw))
    else:
        yaw = _vehicle_yaw(road, x, rng)
    center = np.array([x, y])
    box = FootprintBox(center=center, length=length, width=width, yaw=yaw, class_label=cls)
    return SceneObject(
        box=box,
        frontal_box=frontal_box(center, length),
        feature=object_feature(cls, _lane_side(road, center), center, rng, dim),
    )


def _sample_record(rec_id: str, cfg: SynthConfig, rng: np.random.Generator) -> tuple[SceneRecord, Mixture2D]:
    center_y = float(rng.uniform(-3.0, 3.0))
    width = float(rng.uniform(10.0, 14.0))
    if rng.random() < cfg.curved_prob:
        road = CurvedRoad(center_y=center_y, curvature=float(rng.uniform(-0.004, 0.004)), width=width)
    else:
        road = StraightRoad(center_y=center_y, width=width)

    intent = SYNTH_INTENTS[int(rng.integers(len(SYNTH_INTENTS)))]
    ref_class = REFERRED_CLASSES[int(rng.integers(len(REFERRED_CLASSES)))]
    side = "left" if rng.random() < 0.5 else "right"
    sign = 1.0 if side == "left" else -1.0

    lane = width / 4.0
    x_ref = float(rng.uniform(15.0, 45.0))
    y_ref = float(road.center_at(x_ref)) + sign * lane
    objects = [_make_object(road, ref_class, x_ref, y_ref, rng, cfg.feature_dim)]
    referred_index = 0

    if rng.random() < cfg.confuser_prob:
        c_side = side if rng.random() < cfg.confuser_same_side_prob else ("right" if side == "left" else "left")
        c_sign = 1.0 if c_side == "left" else -1.0
        gap = float(rng.uniform(cfg.min_confuser_gap, cfg.max_confuser_gap))
        direction = 1.0 if rng.random() < 0.5 else -1.0
        x_c = x_ref + direction * gap
        if not 8.0 <= x_c <= 100.0:
            x_c = x_ref - direction * gap
        y_c = float(road.center_at(x_c)) + c_sign * lane
        objects.append(_make_object(road, ref_class, x_c, y_c, rng, cfg.feature_dim))

    extra_classes = [c for c in CLASS_DIMS if c != ref_class]
    for _ in range(int(rng.integers(0, cfg.max_extra_objects + 1))):
        cls = extra_classes[int(rng.integers(len(extra_classes)))]
        x = float(rng.uniform(0.0, 60.0))
        y = float(rng.uniform(-18.0, 18.0))
        objects.append(_make_object(road, cls, x, y, rng, cfg.feature_dim))

    tangent = road.tangent_at(x_ref)
    mode_a = np.array([x_ref, y_ref]) + cfg.forward_offset * tangent
    mode_b = np.array([cfg.beside_point[0], sign * cfg.beside_point[1]])
    means = np.stack([mode_a, mode_b])
    scales = np.full((2, 2), cfg.sigma)
    log_weights = np.log(np.asarray(cfg.mode_weights, dtype=np.float64))
    mixture = Mixture2D(means=means, scales=scales, log_weights=log_weights)

    n_dest = int(rng.choice([1, 2, 3], p=[0.5, 0.3, 0.2]))
    destinations = []
    for _ in range(n_dest):
        for _attempt in range(100):
            mode = int(rng.choice(2, p=cfg.mode_weights))
            dest = means[mode] + cfg.sigma * rng.standard_normal(2)
            if in_map_extent(dest, margin=0.5):
                break
        destinations.append(dest)

    ego_box = FootprintBox(
        center=np.zeros(2), length=EGO_LENGTH, width=EGO_WIDTH, yaw=0.0, class_label="car"
    )
    record = SceneRecord(
        id=rec_id,
        road=road,
        ego_box=ego_box,
        objects=objects,
        command_embedding=command_vector(intent, ref_class, side),
        destinations=destinations,
        intent=intent,
        referred_index=referred_index,
        gt_referred_frontal_box=objects[referred_index].frontal_box,
    )
    record.validate()
    return record, mixture


def gen_synthetic_split(
    name: str, n: int, cfg: SynthConfig, seed: int
) -> tuple[DatasetSplit, GeneratorTruth]:
    records = []
    truth = GeneratorTruth()
    for i in range(n):
        seq = np.random.SeedSequence(seed, spawn_key=(_SPLIT_ORDINAL[name], i))
        rng = np.random.Generator(np.random.PCG64(seq))
        rec_id = f"{name}-{i:05d}"
        rec, mixture = _sample_record(rec_id, cfg, rng)
        records.append(rec)
        truth.mixtures[rec_id] = mixture
    return DatasetSplit(name=name, records=records), truth


def gen_synthetic_dataset(
    cfg: SynthConfig, seed: int
) -> tuple[dict[str, DatasetSplit], GeneratorTruth]:
    """Generate train/val/test splits plus the exact generating mixtures."""
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    splits: dict[str, DatasetSplit] = {}
    truth = GeneratorTruth()
    for name, n in sizes.items():
        split, split_truth = gen_synthetic_split(name, n, cfg, seed)
        splits[name] = split
        truth.mixtures.update(split_truth.mixtures)
    return splits, truth
