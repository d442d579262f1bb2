"""Frame-level rendering over ray ranges, plus the proxy-coverage estimator
that feeds heavy/light scheduling."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import Aabb, Camera, Frame, aabb_intersect_batch, camera_dirs, transform_points, uniform_scale_of
from .errors import DomainError, StateError
from .lightfield import LightFieldAsset, RenderCounters, render_rays


@dataclass(frozen=True)
class RayRange:
    """A schedulable rectangle of pixels for one asset."""

    camera: Camera
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive
    asset_id: str = "asset"

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 <= self.camera.width):
            raise DomainError("ray range x bounds outside frame")
        if not (0 <= self.y0 < self.y1 <= self.camera.height):
            raise DomainError("ray range y bounds outside frame")

    @property
    def pixel_count(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class Tile:
    """A rendered rectangle, positioned within its frame."""

    x0: int
    y0: int
    rgba: np.ndarray  # (h, w, 4)
    depth: np.ndarray  # (h, w)

    @property
    def width(self) -> int:
        return self.rgba.shape[1]

    @property
    def height(self) -> int:
        return self.rgba.shape[0]


@dataclass
class NhitEstimate:
    n_pixel: int
    avg_depth: float
    frame_fraction: float


def render_range(asset: LightFieldAsset, ray_range: RayRange, counters=None):
    """Render the range's rectangle; returns (Tile, instrumentation dict)."""
    if asset.density_atlas is None and asset.analytic_density is None:
        raise StateError("asset is not baked; no density cache to march")
    counters = counters if counters is not None else RenderCounters()
    before_fs = counters.fs_evals
    before_hits = counters.hit_pixels
    start = time.perf_counter()

    cam = ray_range.camera
    xs = np.arange(ray_range.x0, ray_range.x1)
    ys = np.arange(ray_range.y0, ray_range.y1)
    px, py = np.meshgrid(xs, ys)
    dirs = camera_dirs(cam, px.reshape(-1), py.reshape(-1))
    origins = np.broadcast_to(cam.position, dirs.shape)
    rgba, depth = render_rays(asset, origins, dirs, counters)

    h, w = len(ys), len(xs)
    tile = Tile(
        x0=ray_range.x0,
        y0=ray_range.y0,
        rgba=rgba.reshape(h, w, 4),
        depth=depth.reshape(h, w),
    )
    instr = {
        "wall_time_s": time.perf_counter() - start,
        "rays": int(dirs.shape[0]),
        "hits": counters.hit_pixels - before_hits,
        "fs_evals": counters.fs_evals - before_fs,
    }
    return tile, instr


def render_frame(scene: list[tuple[LightFieldAsset, np.ndarray]], camera: Camera,
                 counters=None):
    """Render each asset of the scene to its own full frame (shared world
    depth units), ready for depth composition."""
    frames = []
    for asset, transform in scene:
        placed = asset if transform is None else _with_transform(asset, transform)
        rng = RayRange(camera, 0, 0, camera.width, camera.height, asset.name)
        tile, _ = render_range(placed, rng, counters)
        frames.append(Frame(width=camera.width, height=camera.height,
                            rgba=tile.rgba, depth=tile.depth))
    return frames


def _with_transform(asset: LightFieldAsset, transform: np.ndarray) -> LightFieldAsset:
    from dataclasses import replace

    return replace(asset, object_to_world=np.asarray(transform, dtype=np.float64))


_EXACT_PIXEL_BUDGET = 16384


def estimate_nhit(proxy: Aabb, object_to_world: np.ndarray, camera: Camera) -> NhitEstimate:
    """Coverage and depth of a proxy box on the camera's screen.

    The box is software-rasterized by slab-testing pixel rays inside the
    projected-corner bounding rectangle; large rectangles are sampled on a
    stride grid and rescaled so cost stays bounded.
    """
    w2o = np.linalg.inv(object_to_world)
    corners_world = transform_points(proxy.corners(), object_to_world)
    cam_space = (corners_world - camera.position) @ camera.rotation
    z = -cam_space[:, 2]  # positive in front

    if np.all(z <= 1e-9):
        return NhitEstimate(n_pixel=0, avg_depth=float("inf"), frame_fraction=0.0)

    if np.any(z <= 1e-9):
        # box straddles the image plane: conservative full-frame rectangle
        bx0, by0 = 0, 0
        bx1, by1 = camera.width, camera.height
    else:
        px = cam_space[:, 0] / z * camera.fx + camera.cx - 0.5
        py = -cam_space[:, 1] / z * camera.fy + camera.cy - 0.5
        bx0 = max(0, int(np.floor(px.min())))
        by0 = max(0, int(np.floor(py.min())))
        bx1 = min(camera.width, int(np.ceil(px.max())) + 1)
        by1 = min(camera.height, int(np.ceil(py.max())) + 1)
        if bx0 >= bx1 or by0 >= by1:
            return NhitEstimate(n_pixel=0, avg_depth=float("inf"), frame_fraction=0.0)

    stride = 1
    while ((bx1 - bx0) // stride + 1) * ((by1 - by0) // stride + 1) > _EXACT_PIXEL_BUDGET:
        stride *= 2
    xs = np.arange(bx0, bx1, stride)
    ys = np.arange(by0, by1, stride)
    px_g, py_g = np.meshgrid(xs, ys)
    dirs = camera_dirs(camera, px_g.reshape(-1), py_g.reshape(-1))
    origins = np.broadcast_to(camera.position, dirs.shape)

    o_obj = transform_points(origins, w2o)
    d_raw = dirs @ w2o[:3, :3].T
    scale = uniform_scale_of(w2o)
    d_obj = d_raw / np.linalg.norm(d_raw, axis=1, keepdims=True)
    t_near, _, hit = aabb_intersect_batch(o_obj, d_obj, proxy, 0.0, np.inf)

    n_hit = int(hit.sum())
    if n_hit == 0:
        return NhitEstimate(n_pixel=0, avg_depth=float("inf"), frame_fraction=0.0)
    n_pixel = n_hit * stride * stride
    n_pixel = min(n_pixel, camera.width * camera.height)
    avg_depth = float(np.mean(t_near[hit]) / scale)
    return NhitEstimate(
        n_pixel=n_pixel,
        avg_depth=avg_depth,
        frame_fraction=n_pixel / (camera.width * camera.height),
    )


def tile_ranges(camera: Camera, tile_size: int = 32, asset_id: str = "asset",
                rect=None) -> list[RayRange]:
    """Tile a frame (or a sub-rectangle) into scheduler-granularity ranges."""
    x0, y0, x1, y1 = rect if rect is not None else (0, 0, camera.width, camera.height)
    ranges = []
    for ty in range(y0, y1, tile_size):
        for tx in range(x0, x1, tile_size):
            ranges.append(
                RayRange(camera, tx, ty, min(tx + tile_size, x1), min(ty + tile_size, y1),
                         asset_id)
            )
    return ranges
