"""Built-in analytic scenes: training data generator and exact oracle.

Each scene is a set of analytic objects (density + diffuse color + optional
view-dependent specular term) inside the unit cube.  A brute-force volume
ray tracer renders ground-truth images (premultiplied RGB over black, plus
alpha) that double as training targets and as oracles for compose tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Aabb, Camera, aabb_intersect_batch, camera_dirs, look_at
from .errors import DataError

UNIT_BOX = Aabb(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0))


@dataclass
class AnalyticObject:
    """Analytic fields in this object's own unit-cube space."""

    density: object  # (B,3) -> (B,)
    diffuse: object  # (B,3) -> (B,3)
    specular: object = None  # (points (B,3), view_dirs (B,3)) -> (B,3)
    object_to_world: np.ndarray = field(default_factory=lambda: np.eye(4))
    name: str = "object"

    def radiance(self, pts: np.ndarray, view_dirs: np.ndarray) -> np.ndarray:
        c = np.asarray(self.diffuse(pts), dtype=np.float64)
        if self.specular is not None:
            c = c + np.asarray(self.specular(pts, view_dirs), dtype=np.float64)
        return np.clip(c, 0.0, 1.0)


@dataclass
class AnalyticScene:
    objects: list
    name: str = "scene"


def _sphere_density(center, radius, sigma):
    center = np.asarray(center)

    def fn(pts):
        return sigma * (np.linalg.norm(pts - center, axis=1) <= radius)

    return fn


def _box_density(center, half, sigma):
    center = np.asarray(center)

    def fn(pts):
        return sigma * np.all(np.abs(pts - center) <= half, axis=1)

    return fn


def _checker(pts, scale):
    cells = np.floor(pts * scale).astype(np.int64)
    return (cells.sum(axis=1) % 2).astype(np.float64)


def sphere_scene(sigma: float = 600.0) -> AnalyticScene:
    """One crisp sphere with coarse diffuse zones and a fine specular checker.

    The specular pattern is deliberately higher frequency than the diffuse
    one so view-dependent shading carries fine spatial detail.
    """
    center = np.array([0.5, 0.5, 0.5])
    radius = 0.25

    def diffuse(pts):
        k = _checker(pts, 8.0)[:, None]
        base = np.array([0.75, 0.35, 0.25])
        alt = np.array([0.15, 0.45, 0.75])
        grad = np.clip((pts[:, 2:3] - 0.25) * 2.0, 0.0, 1.0)
        return (k * base + (1 - k) * alt) * (0.6 + 0.4 * grad)

    def specular(pts, view_dirs):
        n = pts - center
        norms = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.maximum(norms, 1e-9)
        facing = np.maximum(0.0, -(view_dirs * n).sum(axis=1))
        fine = 0.35 + 0.65 * _checker(pts, 32.0)
        return (fine * facing**4)[:, None] * np.array([0.9, 0.9, 0.85])

    return AnalyticScene(
        objects=[
            AnalyticObject(
                density=_sphere_density(center, radius, sigma),
                diffuse=diffuse,
                specular=specular,
                name="sphere",
            )
        ],
        name="sphere",
    )


def box_scene(sigma: float = 600.0) -> AnalyticScene:
    center = np.array([0.5, 0.5, 0.5])

    def diffuse(pts):
        stripes = _checker(pts * np.array([1.0, 0.0, 0.0]), 10.0)[:, None]
        return stripes * np.array([0.85, 0.7, 0.2]) + (1 - stripes) * np.array([0.2, 0.3, 0.8])

    return AnalyticScene(
        objects=[
            AnalyticObject(
                density=_box_density(center, 0.2, sigma),
                diffuse=diffuse,
                name="box",
            )
        ],
        name="box",
    )


def two_spheres_scene(sigma: float = 1500.0) -> AnalyticScene:
    """Two disjoint spheres with near-constant colors; compose-oracle fodder."""

    def flat(color):
        color = np.asarray(color)

        def fn(pts):
            return np.tile(color, (len(pts), 1))

        return fn

    return AnalyticScene(
        objects=[
            AnalyticObject(
                density=_sphere_density([0.3, 0.5, 0.5], 0.16, sigma),
                diffuse=flat([0.85, 0.15, 0.1]),
                name="red",
            ),
            AnalyticObject(
                density=_sphere_density([0.72, 0.5, 0.5], 0.16, sigma),
                diffuse=flat([0.1, 0.2, 0.9]),
                name="blue",
            ),
        ],
        name="two_spheres",
    )


def empty_scene() -> AnalyticScene:
    def zero(pts):
        return np.zeros(len(pts))

    def black(pts):
        return np.zeros((len(pts), 3))

    return AnalyticScene(
        objects=[AnalyticObject(density=zero, diffuse=black, name="empty")],
        name="empty",
    )


BUILTIN_SCENES = {
    "sphere": sphere_scene,
    "box": box_scene,
    "two_spheres": two_spheres_scene,
    "empty": empty_scene,
}


def get_scene(name: str) -> AnalyticScene:
    if name not in BUILTIN_SCENES:
        raise DataError(f"unknown built-in scene {name!r}; have {sorted(BUILTIN_SCENES)}")
    return BUILTIN_SCENES[name]()


def render_reference_rays(
    scene: AnalyticScene,
    origins: np.ndarray,
    dirs: np.ndarray,
    step: float = 1.0 / 512.0,
):
    """Brute-force single-pass multi-object volume marcher (the oracle).

    Marches the union of all object densities in world space with a fixed
    step, blending radiance front to back.  Returns (rgb, alpha, depth);
    depth is the expected hit depth (max-weight sample), inf on miss.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)

    inv_transforms = []
    for obj in scene.objects:
        inv_transforms.append(np.linalg.inv(obj.object_to_world))

    # World-space bounds: union of transformed unit boxes.
    mins, maxs = [], []
    for obj in scene.objects:
        corners = UNIT_BOX.corners() @ obj.object_to_world[:3, :3].T + obj.object_to_world[:3, 3]
        mins.append(corners.min(axis=0))
        maxs.append(corners.max(axis=0))
    box = Aabb(min=np.min(mins, axis=0), max=np.max(maxs, axis=0))

    t_near, t_far, ok = aabb_intersect_batch(origins, dirs, box, 0.0, np.inf)
    rgb = np.zeros((n, 3))
    alpha = np.zeros(n)
    depth = np.full(n, np.inf)
    if not np.any(ok):
        return rgb, alpha, depth

    idx = np.flatnonzero(ok)
    trans = np.ones(len(idx))
    best_w = np.zeros(len(idx))
    acc_rgb = np.zeros((len(idx), 3))
    acc_a = np.zeros(len(idx))
    hit_t = np.full(len(idx), np.inf)
    tn = t_near[idx]
    tf = t_far[idx]
    o = origins[idx]
    d = dirs[idx]

    alive = np.arange(len(idx))
    i = 0
    while alive.size:
        t_mid = tn[alive] + (i + 0.5) * step
        keep = t_mid < tf[alive]
        alive = alive[keep]
        if not alive.size:
            break
        t_mid = t_mid[keep]
        pts = o[alive] + t_mid[:, None] * d[alive]

        sigma = np.zeros(len(alive))
        radiance = np.zeros((len(alive), 3))
        for obj, inv in zip(scene.objects, inv_transforms):
            local = pts @ inv[:3, :3].T + inv[:3, 3]
            inside = np.all((local >= 0.0) & (local <= 1.0), axis=1)
            if not np.any(inside):
                continue
            s = np.asarray(obj.density(local[inside]), dtype=np.float64)
            nz = s > 0
            if np.any(nz):
                rows = np.flatnonzero(inside)[nz]
                local_dirs = d[alive][rows] @ inv[:3, :3].T
                local_dirs /= np.linalg.norm(local_dirs, axis=1, keepdims=True)
                c = obj.radiance(local[rows], local_dirs)
                # densities are disjoint by construction; max handles overlap
                take = s[nz] > sigma[rows]
                sigma[rows[take]] = s[nz][take]
                radiance[rows[take]] = c[take]

        absorb = np.exp(-sigma * step)
        w = trans[alive] * (1.0 - absorb)
        acc_rgb[alive] += w[:, None] * radiance
        acc_a[alive] += w
        better = w > best_w[alive]
        sel = alive[better]
        best_w[sel] = w[better]
        hit_t[sel] = t_mid[better]
        trans[alive] *= absorb
        alive = alive[trans[alive] > 1e-4]
        i += 1

    rgb[idx] = acc_rgb
    alpha[idx] = acc_a
    miss = acc_a <= 1e-4
    hit_t[miss] = np.inf
    depth[idx] = hit_t
    return rgb, alpha, depth


def render_reference_frame(scene: AnalyticScene, camera: Camera, step: float = 1.0 / 512.0):
    px, py = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    dirs = camera_dirs(camera, px.reshape(-1), py.reshape(-1))
    origins = np.broadcast_to(camera.position, dirs.shape)
    rgb, alpha, depth = render_reference_rays(scene, origins, dirs, step)
    h, w = camera.height, camera.width
    return (
        rgb.reshape(h, w, 3).astype(np.float32),
        alpha.reshape(h, w).astype(np.float32),
        depth.reshape(h, w).astype(np.float32),
    )


def orbit_camera(
    azimuth: float,
    elevation: float,
    radius: float = 2.0,
    size: int = 64,
    fov_deg: float = 60.0,
    target=(0.5, 0.5, 0.5),
) -> Camera:
    target = np.asarray(target, dtype=np.float64)
    ce, se = math.cos(elevation), math.sin(elevation)
    eye = target + radius * np.array(
        [ce * math.cos(azimuth), ce * math.sin(azimuth), se]
    )
    fx = size / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    up = (0.0, 0.0, 1.0)
    return Camera(
        pose=look_at(eye, target, up), fx=fx, fy=fx, cx=size / 2, cy=size / 2,
        width=size, height=size,
    )


def make_dataset(
    scene: AnalyticScene,
    n_views: int,
    size: int = 64,
    seed: int = 0,
    radius: float = 2.0,
    step: float = 1.0 / 512.0,
):
    """Posed ground-truth images on a view sphere: (images, alphas, cameras)."""
    rng = np.random.default_rng(seed)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    images = np.zeros((n_views, size, size, 3), dtype=np.float32)
    alphas = np.zeros((n_views, size, size), dtype=np.float32)
    cameras = []
    for i in range(n_views):
        azimuth = (i * golden + rng.uniform(0, 0.1)) % (2 * math.pi)
        elevation = math.asin(np.clip(1.0 - 2.0 * (i + 0.5) / n_views, -0.95, 0.95)) * 0.8
        cam = orbit_camera(azimuth, elevation, radius=radius, size=size)
        rgb, alpha, _ = render_reference_frame(scene, cam, step)
        images[i] = rgb
        alphas[i] = alpha
        cameras.append(cam)
    return images, alphas, cameras


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over matching float arrays in [0,1]."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - target) ** 2))
    if mse <= 1e-12:
        return 99.0
    return -10.0 * math.log10(mse)
