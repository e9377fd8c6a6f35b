"""Scene rasterization into the multi-channel layout tensor.

Channel order:

    0-2   road RGB in [0, 1]
    3     ego-car footprint mask
    4     referred-object footprint mask
    5-14  per-class footprint masks, CLASS_LABELS order

The referred object normally appears only in channel 4. With no_ref=True it
is folded back into its class channel and channel 4 stays zero, which is the
ablation input variant.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CLASS_LABELS, PixelFrame, ego_to_pixel, footprint_to_polygon
from .data.schema import CurvedRoad, PngRoad, SceneRecord, StraightRoad

N_CHANNELS = 15
ROAD_GRAY = 0.5
MARKING_WIDTH_M = 0.3

_CLASS_CHANNEL = {label: 5 + i for i, label in enumerate(CLASS_LABELS)}


class LayoutError(ValueError):
    pass


def class_channel_index(label: str) -> int:
    try:
        return _CLASS_CHANNEL[label]
    except KeyError:
        raise LayoutError(f"unknown class label {label!r}") from None


def _pixel_center_coords(frame: PixelFrame) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame x per column and y per row, evaluated at pixel centers."""
    u = np.arange(frame.width) + 0.5
    v = np.arange(frame.height) + 0.5
    x = u / frame.scale - 7.0
    y = (frame.height / 2.0 - v) / frame.scale
    return x, y


def render_road(road, frame: PixelFrame, root: Path | None = None) -> np.ndarray:
    """Road RGB channels, shape (3, H, W), values in [0, 1]."""
    if isinstance(road, PngRoad):
        path = Path(road.path)
        if not path.is_absolute():
            if root is None:
                raise LayoutError(f"relative road raster path {road.path} with no root")
            path = root / path
        img = Image.open(path).convert("RGB")
        img = img.resize((frame.width, frame.height), Image.BOX)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        return arr.transpose(2, 0, 1)
    if not isinstance(road, (StraightRoad, CurvedRoad)):
        raise LayoutError(f"unknown road type {type(road).__name__}")
    x, y = _pixel_center_coords(frame)
    center = road.center_at(x)  # (W,)
    offset = np.abs(y[:, None] - center[None, :])  # (H, W)
    band = offset <= road.width / 2.0
    rgb = np.zeros((3, frame.height, frame.width), dtype=np.float32)
    rgb[:, band] = ROAD_GRAY
    if road.marking:
        marking = offset <= MARKING_WIDTH_M / 2.0
        # a 0.3 m line slips between pixel centers at coarse resolutions, so
        # also mark the row nearest the centerline wherever the line actually
        # crosses the pixel (within half a pixel of its center)
        nearest = np.argmin(offset, axis=0)
        cols = np.arange(frame.width)
        crosses = offset[nearest, cols] <= max(MARKING_WIDTH_M / 2.0, 0.5 / frame.scale)
        marking[nearest[crosses], cols[crosses]] = True
        rgb[:, marking] = 1.0
    return rgb


def road_mask(road_rgb: np.ndarray, min_value: float = 0.3, tol: float = 0.05) -> np.ndarray:
    """Drivable-surface mask: near-achromatic pixels at or above min_value.

    Covers both the gray road surface and white lane markings; tune min_value
    and tol for rasters with a different color scheme.
    """
    if road_rgb.ndim != 3 or road_rgb.shape[0] != 3:
        raise LayoutError(f"road_mask expects (3, H, W), got {road_rgb.shape}")
    spread = road_rgb.max(axis=0) - road_rgb.min(axis=0)
    value = road_rgb.mean(axis=0)
    return (spread <= tol) & (value >= min_value)


def fill_convex_polygon(mask: np.ndarray, corners_px: np.ndarray) -> None:
    """Set mask pixels whose centers fall inside the convex polygon.

    Degenerate fills (footprint thinner than a pixel) fall back to the single
    pixel containing the polygon centroid, so small objects never vanish.
    """
    h, w = mask.shape
    u_lo = max(int(np.floor(corners_px[:, 0].min() - 0.5)), 0)
    u_hi = min(int(np.ceil(corners_px[:, 0].max() + 0.5)), w)
    v_lo = max(int(np.floor(corners_px[:, 1].min() - 0.5)), 0)
    v_hi = min(int(np.ceil(corners_px[:, 1].max() + 0.5)), h)
    filled = False
    if u_lo < u_hi and v_lo < v_hi:
        uu = np.arange(u_lo, u_hi) + 0.5
        vv = np.arange(v_lo, v_hi) + 0.5
        pu = np.broadcast_to(uu[None, :], (v_hi - v_lo, u_hi - u_lo))
        pv = np.broadcast_to(vv[:, None], (v_hi - v_lo, u_hi - u_lo))
        inside = None
        n = len(corners_px)
        sign = None
        for i in range(n):
            a = corners_px[i]
            b = corners_px[(i + 1) % n]
            cross = (b[0] - a[0]) * (pv - a[1]) - (b[1] - a[1]) * (pu - a[0])
            here_pos = cross >= -1e-12
            here_neg = cross <= 1e-12
            if inside is None:
                inside = (here_pos, here_neg)
            else:
                inside = (inside[0] & here_pos, inside[1] & here_neg)
        hit = inside[0] | inside[1]
        if hit.any():
            mask[v_lo:v_hi, u_lo:u_hi] |= hit
            filled = True
    if not filled:
        cu, cv = corners_px.mean(axis=0)
        ui, vi = int(np.floor(cu)), int(np.floor(cv))
        if 0 <= ui < w and 0 <= vi < h:
            mask[vi, ui] = True


def footprint_mask(box, frame: PixelFrame) -> np.ndarray:
    corners = footprint_to_polygon(box)
    corners_px = ego_to_pixel(corners, frame)
    mask = np.zeros((frame.height, frame.width), dtype=bool)
    fill_convex_polygon(mask, corners_px)
    return mask


def rasterize_scene(
    rec: SceneRecord,
    dims_hw: tuple[int, int],
    no_ref: bool = False,
    root: Path | None = None,
) -> np.ndarray:
    """Render one record into the (15, H, W) float32 layout tensor."""
    frame = PixelFrame.from_hw(dims_hw)
    layout = np.zeros((N_CHANNELS, frame.height, frame.width), dtype=np.float32)
    layout[0:3] = render_road(rec.road, frame, root=root)
    layout[3] = footprint_mask(rec.ego_box, frame)
    for idx, obj in enumerate(rec.objects):
        is_referred = rec.referred_index is not None and idx == rec.referred_index
        if is_referred and not no_ref:
            layout[4] = np.maximum(layout[4], footprint_mask(obj.box, frame))
        else:
            ch = class_channel_index(obj.box.class_label)
            layout[ch] = np.maximum(layout[ch], footprint_mask(obj.box, frame))
    return layout


def rasterize_split(
    split, dims_hw: tuple[int, int], no_ref: bool = False, root: Path | None = None
) -> np.ndarray:
    """Rasterize every record to a uint8 (N, 15, H, W) stack.

    Stored as uint8 (value*255 rounded) to keep memory flat; convert back with
    layout_from_uint8. Mask channels survive the round trip exactly.
    """
    if root is None:
        root = getattr(split, "root", None)
    n = len(split)
    out = np.zeros((n, N_CHANNELS, dims_hw[0], dims_hw[1]), dtype=np.uint8)
    for i, rec in enumerate(split):
        layout = rasterize_scene(rec, dims_hw, no_ref=no_ref, root=root)
        out[i] = np.rint(layout * 255.0).astype(np.uint8)
    return out


def layout_from_uint8(stack: np.ndarray) -> np.ndarray:
    return stack.astype(np.float32) / 255.0


def dump_channel_pngs(layout: np.ndarray, out_dir: str | Path, prefix: str) -> list[Path]:
    """Write one grayscale PNG per channel plus an RGB road composite."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = ["road_r", "road_g", "road_b", "ego", "referred"] + [
        f"class_{label}" for label in CLASS_LABELS
    ]
    paths = []
    rgb = (layout[0:3].transpose(1, 2, 0) * 255.0).clip(0, 255).astype(np.uint8)
    road_path = out_dir / f"{prefix}_road.png"
    Image.fromarray(rgb, mode="RGB").save(road_path)
    paths.append(road_path)
    for ch, name in enumerate(names):
        img = (layout[ch] * 255.0).clip(0, 255).astype(np.uint8)
        path = out_dir / f"{prefix}_ch{ch:02d}_{name}.png"
        Image.fromarray(img, mode="L").save(path)
        paths.append(path)
    return paths
