"""Run configuration: strict keys, documented defaults, reproducible
manifests.  Every command echoes its effective config (defaults included)
into the output manifest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density import DensityConfig
from .errors import ConfigError
from .lightfield import LightFieldTrainConfig
from .pipeline import PipelineConfig


@dataclass
class TrainSettings:
    scene: str = "sphere"  # built-in name or a dataset directory
    train_views: int = 20
    test_views: int = 5
    image_size: int = 64
    seed: int = 0
    atlas_base: int = 32
    atlas_cube: int = 8
    density_rel_threshold: float = 0.01
    t_stop: float = 1e-4
    alpha_floor: float = 1e-4
    bake_diffuse: bool = True
    ablation: list = field(default_factory=list)
    density_steps: int = 350
    density_batch: int = 2048
    density_samples: int = 64
    density_levels: int = 6
    density_table_size: int = 16384
    lightfield_steps: int = 800
    lightfield_batch: int = 4096
    psh_resolution: int = 64
    shell_cameras: int = 512
    shell_image_size: int = 32
    diffuse_levels: int = 6
    diffuse_table_size: int = 8192

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            seed=self.seed,
            atlas_base=self.atlas_base,
            atlas_cube=self.atlas_cube,
            density_rel_threshold=self.density_rel_threshold,
            t_stop=self.t_stop,
            alpha_floor=self.alpha_floor,
            bake_diffuse=self.bake_diffuse,
            ablation=tuple(self.ablation),
            density=DensityConfig(
                steps=self.density_steps,
                batch_rays=self.density_batch,
                samples_per_ray=self.density_samples,
                levels=self.density_levels,
                table_size=self.density_table_size,
            ),
            lightfield=LightFieldTrainConfig(
                steps=self.lightfield_steps,
                batch_rays=self.lightfield_batch,
                psh_resolution=self.psh_resolution,
                shell_cameras=self.shell_cameras,
                shell_image_size=self.shell_image_size,
                diffuse_levels=self.diffuse_levels,
                diffuse_table_size=self.diffuse_table_size,
            ),
        )


@dataclass
class ServeSettings:
    host: str = "127.0.0.1"
    port: int = 8390
    heavy_workers: int = 1
    light_workers: int = 2
    light_rays_per_tick: int = 16384
    tick_ms: float = 5.0
    tile_size: int = 32
    pix_fraction: float = 0.10
    depth_threshold: float = 2.0
    depth_far: float = 10.0
    encoding: str = "deflate"  # raw | deflate
    frame_timeout_ticks: int = 2
    cache_ttl_s: float = 2.0
    stats_every_ticks: int = 50
    static_dir: str = ""


def _from_dict(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def load_settings(cls, path: str | None, overrides: list[str] | None, where: str):
    """Config file (JSON) plus `key=value` flag overrides, strictly checked."""
    data = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad JSON in {path}: {e}") from e
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        field_map = {f.name: f for f in dataclasses.fields(cls)}
        if key not in field_map:
            raise ConfigError(f"unknown key in {where}: {key!r}")
        data[key] = _parse_value(raw, field_map[key].type)
    return _from_dict(cls, data, where)


def _parse_value(raw: str, type_name):
    t = str(type_name)
    if "int" in t:
        return int(raw)
    if "float" in t:
        return float(raw)
    if "bool" in t:
        return raw.lower() in ("1", "true", "yes", "on")
    if "list" in t:
        return [s for s in raw.split(",") if s]
    return raw


def settings_dict(settings) -> dict:
    return dataclasses.asdict(settings)


def write_manifest(out_dir: Path, command: str, settings, extra: dict | None = None) -> Path:
    """Everything needed to reproduce the run bitwise in single-context mode."""
    cfg = settings_dict(settings)
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": hashlib.sha256(
            json.dumps(cfg, sort_keys=True).encode()
        ).hexdigest()[:16],
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
