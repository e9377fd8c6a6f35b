"""Training-free point baselines."""

from __future__ import annotations

import numpy as np

from ..geometry import MAP_X_MAX, MAP_X_MIN, MAP_Y_MAX, MAP_Y_MIN, PixelFrame, pixel_to_ego
from ..layout import render_road, road_mask
from ..data.schema import SceneRecord

NAIVE_KINDS = (
    "random-point",
    "random-road-point",
    "pick-ego",
    "random-object",
    "pick-referred",
)

RANDOM_KINDS = ("random-point", "random-road-point", "random-object")


class NaiveBaselineError(ValueError):
    pass


def naive_samples(
    rec: SceneRecord,
    kind: str,
    n: int,
    rng: np.random.Generator,
    road_dims_hw: tuple[int, int] = (200, 300),
    root=None,
) -> np.ndarray:
    """Destination draws for one record. Deterministic kinds return one point.

    Random kinds draw n i.i.d. points; pick-ego / pick-referred are degenerate
    distributions, so a single point stands in for any sample count.
    """
    if kind == "pick-ego":
        return np.asarray(rec.ego_box.center, dtype=np.float64).reshape(1, 2)
    if kind == "pick-referred":
        if rec.referred_index is None:
            raise NaiveBaselineError(f"record {rec.id} has no referred_index")
        return np.asarray(
            rec.objects[rec.referred_index].box.center, dtype=np.float64
        ).reshape(1, 2)
    if kind == "random-point":
        x = rng.uniform(MAP_X_MIN, MAP_X_MAX, size=n)
        y = rng.uniform(MAP_Y_MIN, MAP_Y_MAX, size=n)
        return np.stack([x, y], axis=-1)
    if kind == "random-object":
        if not rec.objects:
            raise NaiveBaselineError(f"record {rec.id} has no objects")
        centers = np.stack([np.asarray(o.box.center, dtype=np.float64) for o in rec.objects])
        idx = rng.integers(0, len(centers), size=n)
        return centers[idx]
    if kind == "random-road-point":
        frame = PixelFrame.from_hw(road_dims_hw)
        mask = road_mask(render_road(rec.road, frame, root=root))
        vs, us = np.nonzero(mask)
        if len(us) == 0:
            raise NaiveBaselineError(f"record {rec.id}: empty road mask")
        pick = rng.integers(0, len(us), size=n)
        # uniform position within each chosen pixel, not just its center
        u = us[pick] + rng.uniform(0.0, 1.0, size=n)
        v = vs[pick] + rng.uniform(0.0, 1.0, size=n)
        return pixel_to_ego(np.stack([u, v], axis=-1), frame)
    raise NaiveBaselineError(f"unknown naive baseline kind {kind!r}")
