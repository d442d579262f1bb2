import numpy as np
import pytest

from radfarm.lightfield import (
    LightFieldTrainConfig,
    MarchParams,
    bake_density_cubes,
    bake_diffuse_cubes,
    init_light_field,
)
from radfarm.scenes import sphere_scene


@pytest.fixture(scope="session")
def toy_asset():
    """Small untrained asset over the analytic sphere's baked density; fast
    to render, quality irrelevant for farm/protocol mechanics."""
    scene = sphere_scene()
    obj = scene.objects[0]
    atlas = bake_density_cubes(lambda p: obj.density(p), b=16, r=4)
    cfg = LightFieldTrainConfig(
        psh_resolution=16, shell_cameras=12, shell_image_size=16,
        diffuse_levels=3, diffuse_table_size=2**10,
    )
    asset = init_light_field(atlas, MarchParams(step=1 / 64), cfg, np.random.default_rng(3))
    asset.diffuse_atlas = bake_diffuse_cubes(asset, shell_cameras=8, shell_image_size=8)
    asset.name = "toy"
    return asset
