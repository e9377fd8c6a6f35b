"""Geometry primitives: the ego-centric frame, pixel frames, boxes and IoU.

The ego car sits at the origin of a right-handed metric frame, facing +x,
with +y pointing to its left. The mapped region is a fixed 120 x 80 m patch
with the ego 7 m from the left (rear) boundary and centered vertically.
Top-down images index this patch with u growing rightward (+x) and v growing
downward (-y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAP_LENGTH_M = 120.0
MAP_HEIGHT_M = 80.0
EGO_OFFSET_M = 7.0  # distance from the left map boundary to the ego center

MAP_X_MIN = -EGO_OFFSET_M
MAP_X_MAX = MAP_LENGTH_M - EGO_OFFSET_M
MAP_Y_MIN = -MAP_HEIGHT_M / 2.0
MAP_Y_MAX = MAP_HEIGHT_M / 2.0

CLASS_LABELS = (
    "car",
    "truck",
    "trailer",
    "bus",
    "construction_vehicle",
    "bicycle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "barrier",
)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PixelFrame:
    """Dimensions of a top-down image covering the full map patch.

    Both axes must share one pixels-per-meter scale, so width/height = 3/2.
    """

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"non-positive frame dims {self.width}x{self.height}")
        if self.width * MAP_HEIGHT_M != self.height * MAP_LENGTH_M:
            raise GeometryError(
                f"unequal axis scales: {self.width}/{MAP_LENGTH_M} != "
                f"{self.height}/{MAP_HEIGHT_M}"
            )

    @classmethod
    def from_hw(cls, dims_hw: tuple[int, int]) -> "PixelFrame":
        h, w = dims_hw
        return cls(width=w, height=h)

    @property
    def scale(self) -> float:
        """Pixels per meter."""
        return self.width / MAP_LENGTH_M


@dataclass(frozen=True)
class FootprintBox:
    """Top-down rectangular footprint of an object, in ego-frame meters."""

    center: tuple[float, float]
    length: float
    width: float
    yaw: float
    class_label: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if not (self.length > 0 and self.width > 0):
            raise GeometryError(f"non-positive box size {self.length}x{self.width}")
        if not (-math.pi < self.yaw <= math.pi):
            raise GeometryError(f"yaw {self.yaw} outside (-pi, pi]")
        if self.class_label not in CLASS_LABELS:
            raise GeometryError(f"unknown class label {self.class_label!r}")


def ego_to_pixel(point, frame: PixelFrame) -> np.ndarray:
    """Map ego-frame meters to continuous (u, v) pixel coordinates.

    Accepts a single (x, y) pair or an (n, 2) array. Outputs may lie outside
    the frame; callers clip.
    """
    p = np.asarray(point, dtype=np.float64)
    s = frame.scale
    u = (p[..., 0] + EGO_OFFSET_M) * s
    v = frame.height / 2.0 - p[..., 1] * s
    return np.stack([u, v], axis=-1)


def pixel_to_ego(point, frame: PixelFrame) -> np.ndarray:
    """Exact inverse of :func:`ego_to_pixel`."""
    q = np.asarray(point, dtype=np.float64)
    s = frame.scale
    x = q[..., 0] / s - EGO_OFFSET_M
    y = (frame.height / 2.0 - q[..., 1]) / s
    return np.stack([x, y], axis=-1)


def in_map_extent(point, margin: float = 0.0) -> bool:
    x, y = float(point[0]), float(point[1])
    return (
        MAP_X_MIN + margin <= x <= MAP_X_MAX - margin
        and MAP_Y_MIN + margin <= y <= MAP_Y_MAX - margin
    )


def validate_aligned_box(box) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = (float(c) for c in box)
    if x1 < x0 or y1 < y0:
        raise GeometryError(f"malformed aligned box {box}")
    return x0, y0, x1, y1


def iou_2d(a, b) -> float:
    """Intersection over union of two axis-aligned boxes (x0, y0, x1, y1).

    Degenerate zero-area boxes yield 0.
    """
    ax0, ay0, ax1, ay1 = validate_aligned_box(a)
    bx0, by0, bx1, by1 = validate_aligned_box(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (by1 - by0) * (bx1 - bx0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def footprint_to_polygon(box: FootprintBox) -> np.ndarray:
    """Counter-clockwise corners (4, 2) of the yaw-rotated footprint, in meters."""
    hl, hw = box.length / 2.0, box.width / 2.0
    corners = np.array(
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]], dtype=np.float64
    )
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return corners @ rot.T + np.asarray(box.center, dtype=np.float64)
