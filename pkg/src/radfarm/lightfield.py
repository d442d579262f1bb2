"""Opacity-light-field rendering: one network query per ray.

A ray is marched through the cached density to find its hit point (the
sample with the largest volume-rendering blend weight) and a coarse opacity
(the accumulated weights).  The specular network is then queried exactly
once at the hit point, combined with a diffuse color and tint coming either
from a second network or from a baked diffuse cube cache.

Every stage also accepts analytic density/color functions in place of
trained fields so tests can use exact closed-form oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .atlas import AnalyticSource, AtlasSource, CubeAtlas, DensitySource, bake_cubes, query_atlas
from .core import (
    Aabb,
    Camera,
    aabb_intersect_batch,
    camera_dirs,
    look_at,
    sh_encode_batch,
    transform_points,
    uniform_scale_of,
)
from .encoding import (
    HashGridEncoder,
    OccupancyGrid,
    PshTable,
    hashgrid_backward,
    hashgrid_encode_with_cache,
    init_features,
    psh_backward,
    psh_construct,
    psh_encode_with_cache,
)
from .errors import ConfigError, DomainError, TrainingError
from .neural import (
    AdamState,
    ErrorMap,
    Mlp,
    adam_step,
    mlp_backward,
    mlp_forward,
    sample_rays,
    update_error_map,
)

UNIT_BOX = Aabb(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0))

ABLATION_VARIANTS = ("hit_point", "opacity", "refine_opacity", "tint", "diffuse_color")


@dataclass(frozen=True)
class ModelWiring:
    """Which parts of the shading pipeline are active (ablation toggles)."""

    use_hit_point: bool = True
    use_opacity: bool = True  # False: alpha := coarse opacity
    refine_opacity: bool = True  # False: network predicts alpha without coarse input
    use_tint: bool = True  # False: tint := 0.5
    use_diffuse_color: bool = True  # False: c := c_s, diffuse net never queried


def ablation_variant(without=()) -> ModelWiring:
    """Wiring for a set of disabled components; unknown names are config errors."""
    names = set(without)
    unknown = names - set(ABLATION_VARIANTS)
    if unknown:
        raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
    return ModelWiring(
        use_hit_point="hit_point" not in names,
        use_opacity="opacity" not in names,
        refine_opacity="refine_opacity" not in names,
        use_tint="tint" not in names,
        use_diffuse_color="diffuse_color" not in names,
    )


@dataclass
class MarchParams:
    step: float
    t_stop: float = 1e-4
    alpha_floor: float = 1e-4


@dataclass
class HitResult:
    hit: bool
    p_h: np.ndarray
    depth: float
    alpha_c: float
    samples_taken: int


@dataclass
class MarchResult:
    """Batched march output; arrays are indexed per input ray."""

    hit: np.ndarray  # (B,) bool
    t_hit: np.ndarray  # (B,) object-space depth, inf sentinel
    alpha_c: np.ndarray  # (B,)
    samples: np.ndarray  # (B,) int
    p_h: np.ndarray  # (B,3), valid where hit
    t_last_trans: np.ndarray  # (B,) transmittance after the march


@dataclass
class RenderCounters:
    """Per-render-context instrumentation, merged on frame completion."""

    fs_evals: int = 0
    fd_evals: int = 0
    hit_pixels: int = 0
    march_samples: int = 0

    def merge(self, other: "RenderCounters") -> None:
        self.fs_evals += other.fs_evals
        self.fd_evals += other.fd_evals
        self.hit_pixels += other.hit_pixels
        self.march_samples += other.march_samples


def march_rays(
    source: DensitySource,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_near: np.ndarray,
    t_far: np.ndarray,
    params: MarchParams,
) -> MarchResult:
    """Fixed-step transmittance march in object space.

    Samples at segment midpoints t_near + (i + 0.5) * step; the hit point is
    the sample with the maximal blend weight (first on ties); marching stops
    when transmittance drops below t_stop or the ray exits.
    """
    n = len(origins)
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)

    alpha_c = np.zeros(n)
    best_w = np.zeros(n)
    t_hit = np.full(n, np.inf)
    samples = np.zeros(n, dtype=np.int64)
    trans = np.ones(n)

    delta = params.step
    idx = np.flatnonzero(t_near < t_far)
    i = 0
    while idx.size:
        t_mid = t_near[idx] + (i + 0.5) * delta
        alive = t_mid < t_far[idx]
        idx = idx[alive]
        if not idx.size:
            break
        t_mid = t_mid[alive]
        pos = origins[idx] + t_mid[:, None] * dirs[idx]
        np.clip(pos, 0.0, 1.0, out=pos)
        sigma, active = source.sample(pos)
        samples[idx] += active
        absorb = np.exp(-sigma * delta)
        w = trans[idx] * (1.0 - absorb)
        better = w > best_w[idx]
        sel = idx[better]
        best_w[sel] = w[better]
        t_hit[sel] = t_mid[better]
        alpha_c[idx] += w
        trans[idx] *= absorb
        idx = idx[trans[idx] > params.t_stop]
        i += 1

    hit = alpha_c > params.alpha_floor
    t_hit[~hit] = np.inf
    p_h = np.where(hit[:, None], origins + np.where(hit, t_hit, 0.0)[:, None] * dirs, 0.0)
    np.clip(p_h, 0.0, 1.0, out=p_h)
    return MarchResult(
        hit=hit, t_hit=t_hit, alpha_c=alpha_c, samples=samples, p_h=p_h, t_last_trans=trans
    )


def march_hit_point(source: DensitySource, ray, params: MarchParams) -> HitResult:
    """Single-ray convenience over march_rays; ray is in object space."""
    t_near, t_far, ok = aabb_intersect_batch(
        ray.origin[None, :], ray.direction[None, :], UNIT_BOX, ray.t_min, ray.t_max
    )
    if not ok[0]:
        return HitResult(False, np.zeros(3), float("inf"), 0.0, 0)
    res = march_rays(
        source, ray.origin[None, :], ray.direction[None, :], t_near, t_far, params
    )
    return HitResult(
        hit=bool(res.hit[0]),
        p_h=res.p_h[0],
        depth=float(res.t_hit[0]),
        alpha_c=float(res.alpha_c[0]),
        samples_taken=int(res.samples[0]),
    )


@dataclass
class ShadingSample:
    c_d: np.ndarray
    c_s: np.ndarray
    t: float
    alpha: float
    c: np.ndarray


@dataclass
class LightFieldAsset:
    """A renderable object: caches, encoders, networks, bounds, transform."""

    density_atlas: CubeAtlas | None
    psh: PshTable | None
    psh_features: np.ndarray | None
    diffuse_encoder: HashGridEncoder | None
    diffuse_features: list | None
    specular_mlp: Mlp | None
    diffuse_mlp: Mlp | None
    march: MarchParams
    proxy: Aabb = field(default_factory=lambda: UNIT_BOX)
    object_to_world: np.ndarray = field(default_factory=lambda: np.eye(4))
    diffuse_atlas: CubeAtlas | None = None
    wiring: ModelWiring = field(default_factory=ModelWiring)
    analytic_density: object = None  # callable, oracle bypass
    analytic_color: object = None  # callable, oracle bypass
    name: str = "asset"

    def density_source(self) -> DensitySource:
        if self.analytic_density is not None and self.density_atlas is None:
            return AnalyticSource(self.analytic_density)
        return AtlasSource(self.density_atlas)

    @property
    def is_analytic(self) -> bool:
        return self.analytic_color is not None

    def world_proxy(self) -> Aabb:
        corners = transform_points(self.proxy.corners(), self.object_to_world)
        return Aabb(min=corners.min(axis=0), max=corners.max(axis=0))


_LOGIT_CLAMP = (1e-4, 1.0 - 1e-4)


def _logit(a):
    return np.log(a / (1.0 - a))


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def shade_batch(
    asset: LightFieldAsset,
    p_h: np.ndarray,
    alpha_c: np.ndarray,
    view_dirs: np.ndarray,
    counters: RenderCounters | None = None,
    want_cache: bool = False,
    force_live_diffuse: bool = False,
):
    """One specular query per input point; diffuse from cache when baked.

    Returns (c, alpha, extras) where extras carries the decomposition and,
    when requested, the caches needed for an exact backward pass.
    """
    w = asset.wiring
    n = len(p_h)
    if asset.is_analytic:
        color = np.asarray(asset.analytic_color(p_h), dtype=np.float64)
        c = np.clip(alpha_c[:, None] * color, 0.0, 1.0)
        alpha = np.clip(alpha_c, 0.0, 1.0)
        if counters is not None:
            counters.hit_pixels += n
        return c, alpha, {"c_d": c, "c_s": np.zeros_like(c), "t": np.ones(n)}

    es, psh_cache = psh_encode_with_cache(asset.psh, asset.psh_features, p_h)
    ev = sh_encode_batch(view_dirs)
    ac = np.clip(alpha_c, *_LOGIT_CLAMP)
    if w.refine_opacity:
        fs_in = np.concatenate([es, ev, ac[:, None]], axis=1)
    else:
        fs_in = np.concatenate([es, ev], axis=1)
    fs_out, fs_cache = mlp_forward(asset.specular_mlp, fs_in)
    if counters is not None:
        counters.fs_evals += n
        counters.hit_pixels += n
    c_s = fs_out[:, :3].astype(np.float64)
    z = fs_out[:, 3].astype(np.float64)

    if not w.use_opacity:
        alpha = np.clip(alpha_c, 0.0, 1.0)
    elif w.refine_opacity:
        alpha = _sigmoid(z + _logit(ac))
    else:
        alpha = _sigmoid(z)

    fd_cache = ed_cache = None
    if not w.use_diffuse_color:
        c_d = np.zeros((n, 3))
        t = np.ones(n)
    elif asset.diffuse_atlas is not None and not force_live_diffuse:
        vals = query_atlas(asset.diffuse_atlas, p_h).astype(np.float64)
        c_d, t = vals[:, :3], vals[:, 3]
    else:
        ed, ed_cache = hashgrid_encode_with_cache(
            asset.diffuse_encoder, asset.diffuse_features, p_h
        )
        fd_out, fd_cache = mlp_forward(asset.diffuse_mlp, ed)
        if counters is not None:
            counters.fd_evals += n
        c_d = fd_out[:, :3].astype(np.float64)
        t = fd_out[:, 3].astype(np.float64)
    if not w.use_tint:
        t = np.full(n, 0.5)

    c_pre = c_d + t[:, None] * c_s
    c = np.clip(c_pre, 0.0, 1.0)
    extras = {"c_d": c_d, "c_s": c_s, "t": t}
    if want_cache:
        extras["cache"] = (psh_cache, fs_cache, ed_cache, fd_cache, c_pre, t, c_s, alpha, ac)
    return c, alpha, extras


def shade(asset: LightFieldAsset, hit: HitResult, view_dir) -> ShadingSample:
    """Shade one hit; shading a miss is a domain error."""
    if not hit.hit:
        raise DomainError("cannot shade a missed ray")
    c, alpha, extras = shade_batch(
        asset,
        hit.p_h[None, :],
        np.array([hit.alpha_c]),
        np.asarray(view_dir, dtype=np.float64)[None, :],
    )
    return ShadingSample(
        c_d=extras["c_d"][0],
        c_s=extras["c_s"][0],
        t=float(extras["t"][0]),
        alpha=float(alpha[0]),
        c=c[0],
    )


def shade_backward(asset: LightFieldAsset, cache, d_c: np.ndarray, d_alpha: np.ndarray):
    """Exact gradients of the shade outputs wrt all trainable groups.

    Returns dict with psh feature grads, diffuse feature grads, and MLP
    (weight, bias) grads; coarse opacity and hit position are treated as
    constants of the frozen march.
    """
    psh_cache, fs_cache, ed_cache, fd_cache, c_pre, t, c_s, alpha, ac = cache
    w = asset.wiring

    pass_mask = (c_pre > 0.0) & (c_pre < 1.0)
    d_cpre = d_c * pass_mask

    d_cs = d_cpre * t[:, None]
    if w.use_opacity:
        d_z = d_alpha * alpha * (1.0 - alpha)
    else:
        d_z = np.zeros_like(d_alpha)
    fs_upstream = np.concatenate([d_cs, d_z[:, None]], axis=1)
    (fs_wg, fs_bg), d_fs_in = mlp_backward(asset.specular_mlp, fs_cache, fs_upstream)
    f_dim = asset.psh_features.shape[1]
    psh_grad = np.zeros_like(asset.psh_features)
    psh_backward(psh_cache, d_fs_in[:, :f_dim], psh_grad)

    grads = {
        "psh_features": psh_grad,
        "fs": (fs_wg, fs_bg),
        "fd": None,
        "diffuse_features": None,
    }
    if fd_cache is not None:
        d_cd = d_cpre
        d_t = (d_cpre * c_s).sum(axis=1) if w.use_tint else np.zeros(len(t))
        fd_upstream = np.concatenate([d_cd, d_t[:, None]], axis=1)
        (fd_wg, fd_bg), d_fd_in = mlp_backward(asset.diffuse_mlp, fd_cache, fd_upstream)
        ed_grads = [np.zeros_like(f) for f in asset.diffuse_features]
        hashgrid_backward(asset.diffuse_encoder, ed_cache, d_fd_in, ed_grads)
        grads["fd"] = (fd_wg, fd_bg)
        grads["diffuse_features"] = ed_grads
    return grads


def render_rays(
    asset: LightFieldAsset,
    origins: np.ndarray,
    dirs: np.ndarray,
    counters: RenderCounters | None = None,
):
    """World-space rays -> (rgba (B,4), depth (B,)); depth is Euclidean
    distance in world units, inf on miss."""
    w2o = np.linalg.inv(asset.object_to_world)
    scale = uniform_scale_of(w2o)
    o_obj = transform_points(np.asarray(origins, dtype=np.float64), w2o)
    d_raw = np.asarray(dirs, dtype=np.float64) @ w2o[:3, :3].T
    d_obj = d_raw / np.linalg.norm(d_raw, axis=1, keepdims=True)

    n = len(origins)
    rgba = np.zeros((n, 4), dtype=np.float32)
    depth = np.full(n, np.inf, dtype=np.float32)

    t_near, t_far, boxhit = aabb_intersect_batch(o_obj, d_obj, asset.proxy, 0.0, np.inf)
    if not np.any(boxhit):
        return rgba, depth

    res = march_rays(
        asset.density_source(),
        o_obj[boxhit],
        d_obj[boxhit],
        t_near[boxhit],
        t_far[boxhit],
        asset.march,
    )
    if counters is not None:
        counters.march_samples += int(res.samples.sum())

    hit_rows = np.flatnonzero(boxhit)[res.hit]
    if len(hit_rows):
        if asset.wiring.use_hit_point:
            p_h = res.p_h[res.hit]
            t_obj = res.t_hit[res.hit]
        else:
            # Ablation: shade at the proxy entry point instead of the
            # estimated hit point.
            t_entry = t_near[boxhit][res.hit]
            p_h = np.clip(
                o_obj[hit_rows] + t_entry[:, None] * d_obj[hit_rows], 0.0, 1.0
            )
            t_obj = t_entry
        c, alpha, _ = shade_batch(
            asset, p_h, res.alpha_c[res.hit], d_obj[hit_rows], counters
        )
        rgba[hit_rows, :3] = c
        rgba[hit_rows, 3] = alpha
        depth[hit_rows] = t_obj / scale
    # Pixels whose refined alpha rounds to zero must carry the miss sentinel.
    zero = rgba[:, 3] <= 0.0
    rgba[zero] = 0.0
    depth[zero] = np.inf
    return rgba, depth


def render_ray(asset: LightFieldAsset, ray, counters: RenderCounters | None = None):
    rgba, depth = render_rays(
        asset, ray.origin[None, :], ray.direction[None, :], counters
    )
    return rgba[0], float(depth[0])


def fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly uniform unit vectors."""
    i = np.arange(n, dtype=np.float64) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def collect_hit_points(
    source: DensitySource,
    params: MarchParams,
    n_cameras: int = 512,
    image_size: int = 32,
    radius: float = 2.0,
    fov_deg: float = 60.0,
) -> np.ndarray:
    """Hit points of a view-sphere sweep; the raw material for hit shells."""
    center = np.array([0.5, 0.5, 0.5])
    fx = image_size / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    points = []
    px, py = np.meshgrid(np.arange(image_size), np.arange(image_size))
    px = px.reshape(-1)
    py = py.reshape(-1)
    for eye_dir in fibonacci_sphere(n_cameras):
        eye = center + radius * eye_dir
        up = (0.0, 0.0, 1.0) if abs(eye_dir[1]) > 0.9 else (0.0, 1.0, 0.0)
        cam = Camera(
            pose=look_at(eye, center, up),
            fx=fx,
            fy=fx,
            cx=image_size / 2,
            cy=image_size / 2,
            width=image_size,
            height=image_size,
        )
        dirs = camera_dirs(cam, px, py)
        origins = np.broadcast_to(cam.position, dirs.shape)
        tn, tf, ok = aabb_intersect_batch(origins, dirs, UNIT_BOX, 0.0, np.inf)
        if not np.any(ok):
            continue
        res = march_rays(source, origins[ok], dirs[ok], tn[ok], tf[ok], params)
        if np.any(res.hit):
            points.append(res.p_h[res.hit])
    if not points:
        return np.zeros((0, 3))
    return np.concatenate(points, axis=0)


def voxelize_points(points: np.ndarray, resolution: int, dilate: int = 1) -> OccupancyGrid:
    """Occupancy of the voxels containing any point, dilated by `dilate` voxels."""
    occ = np.zeros((resolution,) * 3, dtype=bool)
    if len(points):
        cells = np.clip((points * resolution).astype(np.int64), 0, resolution - 1)
        occ[cells[:, 0], cells[:, 1], cells[:, 2]] = True
        for _ in range(dilate):
            grown = occ.copy()
            for axis in range(3):
                grown[tuple(slice(1, None) if a == axis else slice(None) for a in range(3))] |= (
                    occ[tuple(slice(None, -1) if a == axis else slice(None) for a in range(3))]
                )
                grown[tuple(slice(None, -1) if a == axis else slice(None) for a in range(3))] |= (
                    occ[tuple(slice(1, None) if a == axis else slice(None) for a in range(3))]
                )
            occ = grown
    return OccupancyGrid(resolution=resolution, occupied=occ)


def bake_density_cubes(
    field_query, b: int, r: int, threshold: float = 0.0, relative_threshold: float = 0.0
) -> CubeAtlas:
    """Cache a density field as sparse cubes; a cell is allocated iff any of
    its samples exceeds the occupancy threshold."""
    def query(pts):
        return np.asarray(field_query(pts)).reshape(-1, 1)

    return bake_cubes(
        query, b, r, channels=1, threshold=threshold, relative_threshold=relative_threshold
    )


def bake_diffuse_cubes(
    asset: LightFieldAsset,
    shell_points: np.ndarray | None = None,
    shell_cameras: int = 64,
    shell_image_size: int = 32,
) -> CubeAtlas:
    """Cache the diffuse network over the hit-point shell.

    The shell is the set of base cells within one cell of any hit point seen
    from a view-sphere sweep; stored values are the post-activation network
    outputs (RGB + tint), bit-equal to what the live network returns at
    sample points.
    """
    if asset.diffuse_mlp is None:
        raise DomainError("asset has no diffuse network to bake")
    b = asset.density_atlas.base_resolution
    r = asset.density_atlas.cube_resolution
    if shell_points is None:
        shell_points = collect_hit_points(
            asset.density_source(), asset.march, n_cameras=shell_cameras,
            image_size=shell_image_size,
        )
    mask = voxelize_points(shell_points, b, dilate=1).occupied

    def query(pts):
        ed, _ = hashgrid_encode_with_cache(asset.diffuse_encoder, asset.diffuse_features, pts)
        out, _ = mlp_forward(asset.diffuse_mlp, ed)
        return out

    return bake_cubes(query, b, r, channels=4, cell_mask=mask)


@dataclass
class LightFieldTrainConfig:
    steps: int = 1500
    batch_rays: int = 4096
    lr_features: float = 1e-2
    lr_mlp: float = 1e-3
    psh_resolution: int = 64
    psh_features: int = 2
    shell_cameras: int = 512
    shell_image_size: int = 32
    shell_dilate: int = 1
    diffuse_levels: int = 6
    diffuse_base_resolution: int = 8
    diffuse_growth: float = 1.6
    diffuse_table_size: int = 2**13
    hidden: int = 64
    error_cell: int = 8
    error_floor: float = 1e-3
    error_rho: float = 0.1


def init_light_field(
    density_atlas: CubeAtlas,
    march: MarchParams,
    config: LightFieldTrainConfig,
    rng: np.random.Generator,
    wiring: ModelWiring | None = None,
    shell_points: np.ndarray | None = None,
) -> LightFieldAsset:
    """Build encoders and networks for a baked density atlas."""
    wiring = wiring or ModelWiring()
    if shell_points is None:
        shell_points = collect_hit_points(
            AtlasSource(density_atlas),
            march,
            n_cameras=config.shell_cameras,
            image_size=config.shell_image_size,
        )
    shell = voxelize_points(shell_points, config.psh_resolution, dilate=config.shell_dilate)
    verts = shell.vertices()
    if len(verts) == 0:
        # Degenerate (empty) scene: a minimal table keeps the asset renderable.
        verts = np.zeros((1, 3), dtype=np.int64)
    psh = psh_construct(verts, config.psh_resolution, features_per_row=config.psh_features)
    psh_features = init_features(psh.table_size, config.psh_features, rng)

    enc = HashGridEncoder(
        levels=config.diffuse_levels,
        base_resolution=config.diffuse_base_resolution,
        growth=config.diffuse_growth,
        table_size=config.diffuse_table_size,
        features_per_level=2,
    )
    fs_in = config.psh_features + 16 + (1 if wiring.refine_opacity else 0)
    specular = Mlp.create(
        [fs_in, config.hidden, config.hidden, 4],
        [("sigmoid", 3), ("identity", 1)],
        rng,
    )
    diffuse = Mlp.create(
        [enc.output_dim, config.hidden, 4], [("sigmoid", 3), ("sigmoid", 1)], rng
    )
    return LightFieldAsset(
        density_atlas=density_atlas,
        psh=psh,
        psh_features=psh_features,
        diffuse_encoder=enc,
        diffuse_features=enc.init_features(rng),
        specular_mlp=specular,
        diffuse_mlp=diffuse,
        march=march,
        wiring=wiring,
    )


def train_light_field(
    asset: LightFieldAsset,
    images: np.ndarray,
    alphas: np.ndarray,
    cameras: list[Camera],
    config: LightFieldTrainConfig,
    rng: np.random.Generator,
    log=None,
):
    """Stage-2 fit of the shading networks and encoders (march is frozen).

    Returns the per-step loss log.  Hit points are recomputed per batch from
    the frozen density cache so random ray sampling stays unbiased.
    """
    if config.steps == 0:
        return []
    n_img, height, width = images.shape[:3]
    emap = ErrorMap.uniform(
        n_img, height, width, cell_size=config.error_cell,
        floor=config.error_floor, rho=config.error_rho,
    )
    source = asset.density_source()

    groups = {
        "psh_features": ([asset.psh_features], config.lr_features),
        "fs": (asset.specular_mlp.parameters(), config.lr_mlp),
    }
    if asset.wiring.use_diffuse_color:
        groups["diffuse_features"] = (asset.diffuse_features, config.lr_features)
        groups["fd"] = (asset.diffuse_mlp.parameters(), config.lr_mlp)
    opts = {
        name: AdamState(params, lr=lr, names=[f"{name}[{i}]" for i in range(len(params))])
        for name, (params, lr) in groups.items()
    }

    losses = []
    initial_loss = None
    bad_streak = 0
    for step in range(config.steps):
        batch = sample_rays(emap, images, alphas, cameras, config.batch_rays, rng)
        t_near, t_far, boxhit = aabb_intersect_batch(
            batch.origins, batch.dirs, asset.proxy, 0.0, np.inf
        )
        res = march_rays(
            source, batch.origins, batch.dirs,
            np.where(boxhit, t_near, 1.0), np.where(boxhit, t_far, 0.0),
            asset.march,
        )
        b = len(batch)
        pred_c = np.zeros((b, 3))
        pred_a = np.zeros(b)
        hit = res.hit
        cache = None
        if np.any(hit):
            if asset.wiring.use_hit_point:
                p_h = res.p_h[hit]
            else:
                p_h = np.clip(
                    batch.origins[hit] + t_near[hit][:, None] * batch.dirs[hit], 0.0, 1.0
                )
            c, a, extras = shade_batch(
                asset, p_h, res.alpha_c[hit], batch.dirs[hit],
                want_cache=True, force_live_diffuse=True,
            )
            pred_c[hit] = c
            pred_a[hit] = a
            cache = extras["cache"]

        err_c = pred_c - batch.rgb
        err_a = pred_a - batch.alpha
        ray_losses = (err_c**2).sum(axis=1) + err_a**2
        loss = float(ray_losses.mean())
        losses.append(loss)
        if initial_loss is None:
            initial_loss = max(loss, 1e-9)
        bad_streak = bad_streak + 1 if loss > 1e3 * initial_loss else 0
        if bad_streak >= 100:
            raise TrainingError(f"stage-2 diverged at step {step}: loss {loss:.3g}")

        if cache is not None:
            d_c = 2.0 * err_c[hit] / b
            d_a = 2.0 * err_a[hit] / b
            grads = shade_backward(asset, cache, d_c, d_a)
            adam_step([asset.psh_features], [grads["psh_features"]], opts["psh_features"])
            fs_wg, fs_bg = grads["fs"]
            adam_step(asset.specular_mlp.parameters(), fs_wg + fs_bg, opts["fs"])
            if grads["fd"] is not None:
                fd_wg, fd_bg = grads["fd"]
                adam_step(asset.diffuse_mlp.parameters(), fd_wg + fd_bg, opts["fd"])
                adam_step(asset.diffuse_features, grads["diffuse_features"],
                          opts["diffuse_features"])

        update_error_map(emap, batch.cells, ray_losses)
        if log is not None and step % 50 == 0:
            log(step, loss)
    return losses
