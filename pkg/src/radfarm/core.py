"""Geometry, camera, image, and direction-encoding primitives.

Conventions (fixed once, asserted by round-trip tests):

* Right-handed coordinates; a camera looks down its own -z axis, +x right,
  +y up.  ``pose`` is camera-to-world.
* Pixel (px, py) addresses column px, row py; the ray for it passes through
  the pixel center (px + 0.5, py + 0.5), row py increasing downward.
* Depth is the Euclidean distance from the camera origin to the hit point
  (not z-depth), so depths from differently oriented assets compare directly.
* Asset transforms are restricted to rigid + uniform scale so depth ordering
  survives the object-space round trip.

Everything here is immutable after construction and free of hidden state;
all operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

DEPTH_MISS = np.float32(np.inf)

_ORTHO_TOL = 1e-5
_UNIT_TOL = 1e-4


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise DomainError(f"expected 3-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Ray:
    """A world- or object-space ray; ``direction`` is unit length."""

    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin))
        d = _as_vec3(self.direction)
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) > 1e-6:
            raise DomainError(f"ray direction must be unit length, |d|={n}")
        object.__setattr__(self, "direction", d)
        if self.t_min < 0 or not self.t_max > self.t_min:
            raise DomainError(f"bad ray range [{self.t_min}, {self.t_max}]")

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", _as_vec3(self.min))
        object.__setattr__(self, "max", _as_vec3(self.max))
        if not np.all(self.min <= self.max):
            raise DomainError("Aabb requires min <= max componentwise")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))

    def corners(self) -> np.ndarray:
        """The 8 corner points, shape (8, 3)."""
        mn, mx = self.min, self.max
        sel = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)])
        return np.where(sel, mx, mn)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: camera-to-world pose plus pixel intrinsics."""

    pose: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise DomainError("camera pose must be 4x4")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=_ORTHO_TOL):
            raise DomainError("camera pose rotation block must be orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DomainError("image must be at least 1x1")
        object.__setattr__(self, "pose", pose)

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def forward(self) -> np.ndarray:
        """World-space optical axis (camera -z)."""
        return -self.pose[:3, 2]


@dataclass
class Frame:
    """RGBA image plus per-pixel depth; depth == inf marks a miss."""

    width: int
    height: int
    rgba: np.ndarray
    depth: np.ndarray

    @classmethod
    def empty(cls, width: int, height: int) -> "Frame":
        return cls(
            width=width,
            height=height,
            rgba=np.zeros((height, width, 4), dtype=np.float32),
            depth=np.full((height, width), DEPTH_MISS, dtype=np.float32),
        )

    def validate(self) -> None:
        if self.rgba.shape != (self.height, self.width, 4):
            raise DomainError("rgba shape mismatch")
        if self.depth.shape != (self.height, self.width):
            raise DomainError("depth shape mismatch")
        if self.rgba.min() < 0 or self.rgba.max() > 1:
            raise DomainError("rgba channels must lie in [0,1]")
        finite = np.isfinite(self.depth)
        if np.any(self.depth[finite] <= 0):
            raise DomainError("finite depths must be positive")
        miss = ~finite
        if not np.array_equal(self.rgba[..., 3] == 0, miss):
            raise DomainError("alpha == 0 must coincide with depth sentinel")


def camera_dirs(camera: Camera, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """World-space unit directions for (possibly fractional) pixel coords."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    u = (px + 0.5 - camera.cx) / camera.fx
    v = -(py + 0.5 - camera.cy) / camera.fy
    d = np.stack([u, v, -np.ones_like(u)], axis=-1)
    d = d @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_from_pixel(camera: Camera, px: float, py: float) -> Ray:
    """Ray through pixel center (px + 0.5, py + 0.5); sub-pixel coords allowed."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise DomainError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height}")
    d = camera_dirs(camera, np.float64(px), np.float64(py))
    return Ray(origin=camera.position.copy(), direction=d)


def project_point(camera: Camera, point) -> tuple[float, float]:
    """Inverse of ray_from_pixel: world point -> pixel coords."""
    p = camera.rotation.T @ (_as_vec3(point) - camera.position)
    z = -p[2]
    if z <= 0:
        raise DomainError("point is behind the camera")
    px = p[0] / z * camera.fx + camera.cx - 0.5
    py = -p[1] / z * camera.fy + camera.cy - 0.5
    return float(px), float(py)


def aabb_intersect(ray: Ray, box: Aabb):
    """Slab-method ray/box intersection clamped to the ray's [t_min, t_max].

    Returns (t_near, t_far) or None on miss; an origin inside the box yields
    t_near == ray.t_min.
    """
    tn, tf, hit = aabb_intersect_batch(
        ray.origin[None, :], ray.direction[None, :], box, ray.t_min, ray.t_max
    )
    if not hit[0]:
        return None
    return float(tn[0]), float(tf[0])


def aabb_intersect_batch(origins, dirs, box: Aabb, t_min=0.0, t_max=np.inf):
    """Vectorized slab test. Returns (t_near, t_far, hit_mask) per ray."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box.min[None, :] - origins) * inv
        t1 = (box.max[None, :] - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # Rays parallel to a slab: inside contributes (-inf, +inf), outside a miss.
    parallel = dirs == 0.0
    inside = (origins >= box.min[None, :]) & (origins <= box.max[None, :])
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=-1), t_min)
    t_far = np.minimum(hi.min(axis=-1), t_max)
    return t_near, t_far, t_near <= t_far


# Real spherical harmonics, degrees 0..3, in the fixed band order
# (l,m) = (0,0), (1,-1), (1,0), (1,1), (2,-2) ... (3,3).
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)

SH_DIM = 16


def sh_encode_batch(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 degree-0..3 SH basis values for unit directions (N,3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(dirs.shape[:-1] + (SH_DIM,), dtype=np.float64)
    out[..., 0] = _C0
    out[..., 1] = -_C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = -_C1 * x
    out[..., 4] = _C2[0] * x * y
    out[..., 5] = _C2[1] * y * z
    out[..., 6] = _C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = _C2[3] * x * z
    out[..., 8] = _C2[4] * (xx - yy)
    out[..., 9] = _C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = _C3[1] * x * y * z
    out[..., 11] = _C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = _C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = _C3[5] * z * (xx - yy)
    out[..., 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_encode(direction) -> np.ndarray:
    """16 SH basis values for one unit direction."""
    d = _as_vec3(direction)
    n = float(np.linalg.norm(d))
    if abs(n - 1.0) > _UNIT_TOL:
        raise DomainError(f"direction must be unit length, |d|={n}")
    return sh_encode_batch(d)


def uniform_scale_of(matrix: np.ndarray) -> float:
    """Scale factor of a rigid + uniform-scale 4x4; raises on anything else."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (4, 4):
        raise DomainError("transform must be 4x4")
    lin = m[:3, :3]
    norms = np.linalg.norm(lin, axis=0)
    s = float(norms.mean())
    if s <= 0 or not np.allclose(norms, s, rtol=1e-5):
        raise DomainError("transform must have uniform positive scale")
    rot = lin / s
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5):
        raise DomainError("transform must be rigid + uniform scale")
    return s


def transform_ray(ray: Ray, world_to_object: np.ndarray) -> Ray:
    """Map a ray into another space, rescaling its t-range by the transform's
    uniform scale so parameter values stay comparable to distances there."""
    m = np.asarray(world_to_object, dtype=np.float64)
    s = uniform_scale_of(m)
    origin = m[:3, :3] @ ray.origin + m[:3, 3]
    d = m[:3, :3] @ ray.direction
    d = d / np.linalg.norm(d)
    t_max = ray.t_max * s if np.isfinite(ray.t_max) else np.inf
    return Ray(origin=origin, direction=d, t_min=ray.t_min * s, t_max=t_max)


def transform_points(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a 4x4 transform to (N,3) points."""
    m = np.asarray(matrix, dtype=np.float64)
    return points @ m[:3, :3].T + m[:3, 3]


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose looking from eye toward target (camera -z)."""
    eye = _as_vec3(eye)
    fwd = _as_vec3(target) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = _as_vec3(up)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -fwd
    pose[:3, 3] = eye
    return pose
