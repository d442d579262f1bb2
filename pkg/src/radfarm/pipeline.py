"""End-to-end asset production: density fit -> density cubes -> light-field
training -> diffuse cubes.  Seeds fan out deterministically per stage."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .atlas import AtlasSource
from .core import Camera, Frame
from .density import DensityConfig, DensityField, train_density_field
from .lightfield import (
    LightFieldAsset,
    LightFieldTrainConfig,
    MarchParams,
    ablation_variant,
    bake_density_cubes,
    bake_diffuse_cubes,
    collect_hit_points,
    init_light_field,
    train_light_field,
)
from .renderer import RayRange, render_range
from .scenes import psnr


@dataclass
class PipelineConfig:
    seed: int = 0
    atlas_base: int = 32  # b
    atlas_cube: int = 8  # r
    density_rel_threshold: float = 0.01
    t_stop: float = 1e-4
    alpha_floor: float = 1e-4
    bake_diffuse: bool = True
    ablation: tuple = ()
    density: DensityConfig = field(default_factory=DensityConfig)
    lightfield: LightFieldTrainConfig = field(default_factory=LightFieldTrainConfig)

    def march_params(self) -> MarchParams:
        return MarchParams(
            step=1.0 / (self.atlas_base * self.atlas_cube),
            t_stop=self.t_stop,
            alpha_floor=self.alpha_floor,
        )


def train_asset(
    images: np.ndarray,
    alphas: np.ndarray,
    cameras: list[Camera],
    config: PipelineConfig,
    log=None,
    density_field: DensityField | None = None,
):
    """Run the full pipeline; returns (asset, metrics dict)."""
    seq = np.random.SeedSequence(config.seed)
    rng_stage1, rng_init, rng_stage2 = [np.random.default_rng(s) for s in seq.spawn(3)]
    metrics = {"seed": config.seed, "stages": {}}

    def stage(name):
        if log:
            log(f"[{name}]")
        return time.perf_counter()

    t = stage("density-fit")
    if density_field is None:
        density_field, stage1_losses = train_density_field(
            images, alphas, cameras, config.density, rng_stage1,
            log=(lambda s, l: log(f"  step {s}: loss {l:.5f}")) if log else None,
        )
    else:
        stage1_losses = []
    metrics["stages"]["density_fit"] = {
        "seconds": time.perf_counter() - t,
        "steps": len(stage1_losses),
        "final_loss": stage1_losses[-1] if stage1_losses else None,
    }

    t = stage("density-cubes")
    atlas = bake_density_cubes(
        density_field.query,
        config.atlas_base,
        config.atlas_cube,
        relative_threshold=config.density_rel_threshold,
    )
    march = config.march_params()
    metrics["stages"]["density_cubes"] = {
        "seconds": time.perf_counter() - t,
        "cubes": atlas.cube_count,
        "bytes": atlas.nbytes(),
    }

    t = stage("hit-shell")
    wiring = ablation_variant(config.ablation)
    shell_points = collect_hit_points(
        AtlasSource(atlas),
        march,
        n_cameras=config.lightfield.shell_cameras,
        image_size=config.lightfield.shell_image_size,
    )
    asset = init_light_field(
        atlas, march, config.lightfield, rng_init, wiring=wiring, shell_points=shell_points
    )
    metrics["stages"]["hit_shell"] = {
        "seconds": time.perf_counter() - t,
        "points": int(len(shell_points)),
        "psh_slots": asset.psh.table_size,
        "psh_load_factor": asset.psh.report.load_factor,
        "psh_adjacency": asset.psh.report.adjacency_score,
    }

    t = stage("light-field-fit")
    stage2_losses = train_light_field(
        asset, images, alphas, cameras, config.lightfield, rng_stage2,
        log=(lambda s, l: log(f"  step {s}: loss {l:.5f}")) if log else None,
    )
    metrics["stages"]["light_field_fit"] = {
        "seconds": time.perf_counter() - t,
        "steps": len(stage2_losses),
        "final_loss": stage2_losses[-1] if stage2_losses else None,
    }
    metrics["loss_curve"] = stage2_losses

    if config.bake_diffuse and wiring.use_diffuse_color:
        t = stage("diffuse-cubes")
        asset.diffuse_atlas = bake_diffuse_cubes(asset, shell_points=shell_points)
        metrics["stages"]["diffuse_cubes"] = {
            "seconds": time.perf_counter() - t,
            "cubes": asset.diffuse_atlas.cube_count,
            "bytes": asset.diffuse_atlas.nbytes(),
        }
    return asset, metrics


def render_asset_frame(asset: LightFieldAsset, camera: Camera, counters=None) -> Frame:
    tile, _ = render_range(
        asset, RayRange(camera, 0, 0, camera.width, camera.height, asset.name), counters
    )
    return Frame(width=camera.width, height=camera.height, rgba=tile.rgba, depth=tile.depth)


def evaluate_psnr(
    asset: LightFieldAsset,
    images: np.ndarray,
    alphas: np.ndarray,
    cameras: list[Camera],
) -> float:
    """Held-out PSNR over RGB of rendered vs ground-truth views."""
    preds = []
    targets = []
    for i, cam in enumerate(cameras):
        frame = render_asset_frame(asset, cam)
        preds.append(frame.rgba[..., :3])
        targets.append(images[i])
    return psnr(np.stack(preds), np.stack(targets))
