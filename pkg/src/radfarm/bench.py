"""Benchmarks: encoder throughput and slot locality, cache-tier ablation,
render concurrency, and the zoom sweep feeding the scaling check."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .core import aabb_intersect_batch, camera_dirs
from .density import DensityConfig, train_density_field
from .encoding import hashgrid_encode_with_cache, psh_encode_with_cache, _base_weights
from .lightfield import (
    LightFieldAsset,
    LightFieldTrainConfig,
    MarchParams,
    RenderCounters,
    bake_density_cubes,
    bake_diffuse_cubes,
    init_light_field,
    UNIT_BOX,
)
from .pipeline import render_asset_frame
from .renderer import RayRange, render_range
from .scenes import get_scene, make_dataset, orbit_camera




def encoder_throughput(asset: LightFieldAsset, n_points: int = 200_000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.3, 0.7, (n_points, 3)).astype(np.float32)
    t0 = time.perf_counter()
    psh_encode_with_cache(asset.psh, asset.psh_features, x)
    t_psh = time.perf_counter() - t0
    t0 = time.perf_counter()
    hashgrid_encode_with_cache(asset.diffuse_encoder, asset.diffuse_features, x)
    t_grid = time.perf_counter() - t0
    return {
        "points": n_points,
        "psh_points_per_s": n_points / t_psh,
        "hashgrid_points_per_s": n_points / t_grid,
    }


def _fresh_lines_per_query(indices: np.ndarray, rows_per_line: int) -> float:
    """Mean count of cache lines a query touches that its predecessor did
    not; indices has shape (samples, accesses_per_query)."""
    lines = indices // rows_per_line
    fresh = len(np.unique(lines[0]))
    for i in range(1, len(lines)):
        fresh += len(np.setdiff1d(lines[i], lines[i - 1]))
    return fresh / len(lines)


def slot_trace_stat(asset: LightFieldAsset, n_rays: int = 256, seed: int = 0,
                    row_bytes: int = 8, line_bytes: int = 64) -> dict:
    """Locality of table accesses along rays.

    Two views of the same access stream:
    * mean |slot delta| between consecutive row accesses, with the hash
      grid's level tables laid out consecutively (as they are in memory),
      so level-to-level hops count like the distances they are;
    * fresh cache lines per query: lines touched that the previous sample's
      query did not touch (single resolution touches one table region; the
      multiresolution encoder spreads over every level's table).
    """
    rng = np.random.default_rng(seed)
    size = max(8, int(math.isqrt(n_rays * 4)))
    cam = orbit_camera(rng.uniform(0, 2 * math.pi), 0.3, radius=2.0, size=size)
    px, py = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    dirs = camera_dirs(cam, px.reshape(-1), py.reshape(-1))
    origins = np.broadcast_to(cam.position, dirs.shape)
    tn, tf, ok = aabb_intersect_batch(origins, dirs, UNIT_BOX, 0.0, np.inf)

    step = asset.march.step
    source = asset.density_source()
    rows_per_line = max(1, line_bytes // row_bytes)
    level_bases = np.cumsum([0] + asset.diffuse_encoder.row_counts[:-1])

    psh_deltas, grid_deltas = [], []
    psh_fresh, grid_fresh = [], []
    rays_used = 0
    for ray in np.flatnonzero(ok):
        if rays_used >= n_rays:
            break
        n_steps = int((tf[ray] - tn[ray]) / step)
        if n_steps < 2:
            continue
        ts = tn[ray] + (np.arange(n_steps) + 0.5) * step
        pts = origins[ray] + ts[:, None] * dirs[ray]
        np.clip(pts, 0.0, 1.0, out=pts)
        _, active = source.sample(pts)
        pts = pts[active]
        if len(pts) < 2:
            continue
        rays_used += 1

        base, _ = _base_weights(pts, asset.psh.resolution)
        slots = asset.psh.corner_slots(base)  # (S, 8)
        psh_deltas.append(np.abs(np.diff(slots.reshape(-1).astype(np.int64))))
        psh_fresh.append(_fresh_lines_per_query(slots, rows_per_line))

        per_sample = []
        for level in range(asset.diffuse_encoder.levels):
            b, _ = _base_weights(pts, asset.diffuse_encoder.resolutions[level])
            idx = asset.diffuse_encoder.corner_indices(level, b) + level_bases[level]
            per_sample.append(idx)
        unified = np.concatenate(per_sample, axis=1)  # (S, 8*L)
        grid_deltas.append(np.abs(np.diff(unified.reshape(-1).astype(np.int64))))
        grid_fresh.append(_fresh_lines_per_query(unified, rows_per_line))

    return {
        "psh_mean_slot_delta": float(np.concatenate(psh_deltas).mean()),
        "hashgrid_mean_slot_delta": float(np.concatenate(grid_deltas).mean()),
        "psh_fresh_lines_per_query": float(np.mean(psh_fresh)),
        "hashgrid_fresh_lines_per_query": float(np.mean(grid_fresh)),
        "rays": rays_used,
    }


def _fps_of(asset: LightFieldAsset, cams, force_live_diffuse=False) -> float:
    if force_live_diffuse:
        asset = replace(asset, diffuse_atlas=None)
    t0 = time.perf_counter()
    for cam in cams:
        render_asset_frame(asset, cam)
    return len(cams) / (time.perf_counter() - t0)


def cache_ablation(
    scene_name: str = "sphere",
    density_steps: int = 120,
    frames: int = 6,
    size: int = 96,
    seed: int = 0,
    atlas_base: int = 32,
    atlas_cube: int = 8,
) -> dict:
    """FPS of the cache tiers: network-march base, +density cubes, +diffuse
    cubes.  Shading quality is irrelevant to the timing, so the shading
    networks stay at init."""
    scene = get_scene(scene_name)
    images, alphas, cams = make_dataset(scene, 8, size=48, seed=seed)
    rng = np.random.default_rng(seed)
    field, _ = train_density_field(
        images, alphas, cams, DensityConfig(steps=density_steps), rng
    )
    atlas = bake_density_cubes(field.query, atlas_base, atlas_cube, relative_threshold=0.01)
    march = MarchParams(step=1.0 / (atlas_base * atlas_cube))
    cfg = LightFieldTrainConfig(
        psh_resolution=32, shell_cameras=64, shell_image_size=16,
        diffuse_levels=4, diffuse_table_size=2**12,
    )
    asset = init_light_field(atlas, march, cfg, rng)
    asset.diffuse_atlas = bake_diffuse_cubes(asset, shell_cameras=32, shell_image_size=16)

    views = [orbit_camera(0.5 * i, 0.25, radius=2.0, size=size) for i in range(frames)]
    # base tier: no density cache, the network answers every march sample
    base_asset = replace(
        asset, density_atlas=None, analytic_density=field.query, diffuse_atlas=None
    )
    fps_base = _fps_of(base_asset, views)
    fps_dt = _fps_of(asset, views, force_live_diffuse=True)
    fps_dt_dift = _fps_of(asset, views)
    return {
        "fps_base": fps_base,
        "fps_density_cubes": fps_dt,
        "fps_density_and_diffuse_cubes": fps_dt_dift,
        "speedup_density_cubes": fps_dt / fps_base,
        "speedup_full_caches": fps_dt_dift / fps_base,
        "frames": frames,
        "size": size,
    }


def _render_orbit(args):
    asset, size, phase, count, limit_threads = args
    if limit_threads:
        # parallel workers must not each spin up a full BLAS thread pool
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            for i in range(count):
                render_asset_frame(
                    asset, orbit_camera(phase + 0.3 * i, 0.25, radius=2.0, size=size)
                )
        return count
    for i in range(count):
        render_asset_frame(asset, orbit_camera(phase + 0.3 * i, 0.25, radius=2.0, size=size))
    return count


def concurrency_sweep(asset: LightFieldAsset, max_workers: int = 4,
                      frames_per_worker: int = 12, size: int = 64) -> dict:
    """Frames/s with 1..N parallel renderers.

    Renders run in separate single-BLAS-thread processes (the math library
    would otherwise oversubscribe the cores); pools are warmed before timing
    so startup cost does not pollute the measurement.
    """
    results = {}
    for n in range(1, max_workers + 1):
        jobs = [(asset, size, 0.7 * w, frames_per_worker, n > 1) for w in range(n)]
        if n == 1:
            _render_orbit((asset, size, 0.0, 2, False))  # warm caches
            t0 = time.perf_counter()
            _render_orbit(jobs[0])
            dt = time.perf_counter() - t0
        else:
            with ProcessPoolExecutor(max_workers=n) as pool:
                list(pool.map(_render_orbit, [(asset, size, 0.0, 1, True)] * n))  # warm
                t0 = time.perf_counter()
                list(pool.map(_render_orbit, jobs))
                dt = time.perf_counter() - t0
        results[n] = n * frames_per_worker / dt
    return {
        "fps_by_workers": results,
        "scaling_vs_single": {n: results[n] / results[1] for n in results},
    }


def zoom_sweep(asset: LightFieldAsset, points: int = 10, size: int = 128,
               far: float = 5.0, near: float = 1.05) -> list[dict]:
    """Render frames while zooming in; rows carry hit counts and wall time."""
    rows = []
    for i in range(points):
        radius = far * (near / far) ** (i / (points - 1))
        cam = orbit_camera(0.6, 0.25, radius=radius, size=size)
        counters = RenderCounters()
        t0 = time.perf_counter()
        render_range(asset, RayRange(cam, 0, 0, size, size), counters)
        rows.append(
            {
                "radius": radius,
                "hits": counters.hit_pixels,
                "seconds": time.perf_counter() - t0,
                "fs_evals": counters.fs_evals,
            }
        )
    return rows


def scaling_ratios(rows: list[dict]) -> list[dict]:
    """time(2k)/time(k) at every doubling of the hit count, interpolating
    log-time against log-hits across the sweep."""
    pts = sorted((r["hits"], r["seconds"]) for r in rows if r["hits"] > 0)
    hits = np.array([p[0] for p in pts], dtype=np.float64)
    secs = np.array([p[1] for p in pts], dtype=np.float64)
    if len(hits) < 2:
        return []
    log_h, log_t = np.log(hits), np.log(secs)

    def time_at(k: float) -> float:
        return float(np.exp(np.interp(np.log(k), log_h, log_t)))

    out = []
    k = hits[0]
    while 2 * k <= hits[-1]:
        out.append({"k": k, "ratio": time_at(2 * k) / time_at(k)})
        k *= 2
    return out
