"""Dataset record types and validation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import (
    FootprintBox,
    GeometryError,
    in_map_extent,
    validate_aligned_box,
)

COMMAND_DIM = 768
DEFAULT_FEATURE_DIM = 1538
MAX_DESTINATIONS = 3


class SchemaError(ValueError):
    pass


class Intent(enum.Enum):
    TURN_LEFT = "Turn Left"
    TURN_RIGHT = "Turn Right"
    CHANGE_LANE_LEFT = "Change Lane Left"
    CHANGE_LANE_RIGHT = "Change Lane Right"
    U_TURN_LEFT = "U-Turn Left"
    U_TURN_RIGHT = "U-Turn Right"
    PARK = "Park"
    STOP = "Stop"
    PICK_UP = "Pick Up"
    CONTINUE = "Continue"
    OVERTAKE = "Overtake"
    DROP_OFF = "Drop Off"
    FOLLOW = "Follow"
    SLOW_DOWN = "Slow Down"
    WAIT = "Wait"
    APPROACH = "Approach"
    MOVE_AWAY = "Move Away"
    OTHER = "Other"

    @classmethod
    def parse(cls, label: str) -> "Intent":
        for member in cls:
            if member.value == label:
                return member
        raise SchemaError(f"unknown intent label {label!r}")


@dataclass(frozen=True)
class StraightRoad:
    center_y: float
    width: float
    marking: bool = True

    def center_at(self, x: np.ndarray) -> np.ndarray:
        return np.full_like(np.asarray(x, dtype=np.float64), self.center_y)

    def tangent_at(self, x: float) -> np.ndarray:
        return np.array([1.0, 0.0])


@dataclass(frozen=True)
class CurvedRoad:
    center_y: float
    curvature: float  # centerline y(x) = center_y + curvature * x^2
    width: float
    marking: bool = True

    def center_at(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.center_y + self.curvature * x**2

    def tangent_at(self, x: float) -> np.ndarray:
        t = np.array([1.0, 2.0 * self.curvature * x])
        return t / np.linalg.norm(t)


@dataclass(frozen=True)
class PngRoad:
    """Road raster stored as a side-car PNG, path relative to the dataset dir."""

    path: str


RoadSource = StraightRoad | CurvedRoad | PngRoad


@dataclass
class SceneObject:
    box: FootprintBox
    frontal_box: tuple[float, float, float, float] | None = None
    feature: np.ndarray | None = None


@dataclass
class SceneRecord:
    id: str
    road: RoadSource
    ego_box: FootprintBox
    objects: list[SceneObject]
    command_embedding: np.ndarray
    destinations: list[np.ndarray]
    intent: Intent
    referred_index: int | None = None
    gt_referred_frontal_box: tuple[float, float, float, float] | None = None
    features_file: str | None = None

    def validate(self) -> None:
        emb = np.asarray(self.command_embedding)
        if emb.shape != (COMMAND_DIM,):
            raise SchemaError(
                f"record {self.id}: command embedding shape {emb.shape}, "
                f"expected ({COMMAND_DIM},)"
            )
        if not 1 <= len(self.destinations) <= MAX_DESTINATIONS:
            raise SchemaError(
                f"record {self.id}: {len(self.destinations)} destinations, expected 1..3"
            )
        for dest in self.destinations:
            if not in_map_extent(dest):
                raise SchemaError(
                    f"record {self.id}: destination {tuple(dest)} outside map extent"
                )
        if self.referred_index is not None:
            if not 0 <= self.referred_index < len(self.objects):
                raise SchemaError(
                    f"record {self.id}: referred_index {self.referred_index} does not "
                    f"index {len(self.objects)} objects"
                )
        if self.gt_referred_frontal_box is not None:
            try:
                validate_aligned_box(self.gt_referred_frontal_box)
            except GeometryError as exc:
                raise SchemaError(f"record {self.id}: {exc}") from exc
        dims = {o.feature.shape[0] for o in self.objects if o.feature is not None}
        if len(dims) > 1:
            raise SchemaError(f"record {self.id}: inconsistent object feature dims {dims}")

    @property
    def referred_object(self) -> SceneObject | None:
        if self.referred_index is None:
            return None
        return self.objects[self.referred_index]

    def destination_array(self) -> np.ndarray:
        return np.stack([np.asarray(d, dtype=np.float64) for d in self.destinations])


@dataclass
class DatasetSplit:
    name: str
    records: list[SceneRecord] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self) -> None:
        if self.name not in ("train", "val", "test"):
            raise SchemaError(f"unknown split name {self.name!r}")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate record ids in split {self.name!r}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)
