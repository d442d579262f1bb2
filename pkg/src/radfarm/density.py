"""Stage-1 density field: a hash-grid encoder plus a small network trained by
classic volume rendering, or an analytic bypass for exact test oracles.

Only the density survives into stage 2 (it is baked into cube caches and
frozen); the color head exists to give the fit a training signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, camera_dirs, Aabb, aabb_intersect_batch
from .encoding import HashGridEncoder, hashgrid_backward, hashgrid_encode_with_cache
from .errors import DomainError, TrainingError
from .neural import AdamState, Mlp, adam_step, mlp_backward, mlp_forward

SCENE_BOX = Aabb(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0))


@dataclass
class DensityField:
    """sigma(x) >= 0 on the unit cube; trained or analytic."""

    encoder: HashGridEncoder | None = None
    features: list | None = None
    mlp: Mlp | None = None
    analytic: object = None  # callable (B,3) -> (B,)
    analytic_rgb: object = None  # callable (B,3) -> (B,3), oracle plumbing

    @classmethod
    def create(cls, config: "DensityConfig", rng: np.random.Generator) -> "DensityField":
        enc = HashGridEncoder(
            levels=config.levels,
            base_resolution=config.base_resolution,
            growth=config.growth,
            table_size=config.table_size,
            features_per_level=config.features_per_level,
        )
        mlp = Mlp.create(
            [enc.output_dim, config.hidden, 4],
            [("exponential", 1), ("sigmoid", 3)],
            rng,
        )
        return cls(encoder=enc, features=enc.init_features(rng), mlp=mlp)

    @classmethod
    def from_analytic(cls, density_fn, rgb_fn=None) -> "DensityField":
        return cls(analytic=density_fn, analytic_rgb=rgb_fn)

    def query(self, x: np.ndarray) -> np.ndarray:
        """Density only, (B,3) -> (B,)."""
        x = np.atleast_2d(x)
        if self.analytic is not None:
            return np.asarray(self.analytic(x), dtype=np.float64)
        enc, _ = hashgrid_encode_with_cache(
            self.encoder, self.features, x.astype(np.float32, copy=False)
        )
        out, _ = mlp_forward(self.mlp, enc)
        return out[:, 0].astype(np.float64)

    def query_sigma_rgb(self, x: np.ndarray):
        x = np.atleast_2d(x)
        if self.analytic is not None:
            sigma = np.asarray(self.analytic(x), dtype=np.float64)
            rgb = (
                np.asarray(self.analytic_rgb(x), dtype=np.float64)
                if self.analytic_rgb is not None
                else np.zeros((len(x), 3))
            )
            return sigma, rgb
        enc, _ = hashgrid_encode_with_cache(
            self.encoder, self.features, x.astype(np.float32, copy=False)
        )
        out, _ = mlp_forward(self.mlp, enc)
        return out[:, 0].astype(np.float64), out[:, 1:4].astype(np.float64)


@dataclass
class DensityConfig:
    levels: int = 6
    base_resolution: int = 8
    growth: float = 1.8
    table_size: int = 2**14
    features_per_level: int = 2
    hidden: int = 64
    steps: int = 600
    batch_rays: int = 2048
    samples_per_ray: int = 64
    lr_features: float = 1e-2
    lr_mlp: float = 1e-3


def composite_rays(sigma: np.ndarray, deltas: np.ndarray, rgb: np.ndarray):
    """Volume-render samples: returns (color, alpha, weights, trans, t_last).

    sigma, deltas: (B,S); rgb: (B,S,3).  w_i = T_i (1 - exp(-sigma_i d_i)),
    T_i = exp(-sum_{j<i} sigma_j d_j); t_last is the transmittance after the
    final sample (sum of weights == 1 - t_last).
    """
    tau = sigma * deltas
    t_before = np.exp(-np.cumsum(np.concatenate([np.zeros_like(tau[:, :1]), tau], axis=1), axis=1))
    trans = t_before[:, :-1]  # T_i
    weights = trans * (1.0 - np.exp(-tau))
    color = (weights[..., None] * rgb).sum(axis=1)
    alpha = weights.sum(axis=1)
    return color, alpha, weights, trans, t_before[:, -1]


def composite_backward(sigma, deltas, rgb, weights, trans, d_color, d_alpha):
    """Gradients of the composite wrt per-sample sigma and rgb.

    d(w_i)/d(sigma_j) = T_i d_i exp(-tau_i) for j == i, -d_j w_i for j < i.
    """
    g_w = (d_color[:, None, :] * rgb).sum(axis=2) + d_alpha[:, None]  # dL/dw_i
    d_rgb = weights[..., None] * d_color[:, None, :]

    tau = sigma * deltas
    # suffix[j] = sum_{i > j} g_i w_i
    gw = g_w * weights
    suffix = np.flip(np.cumsum(np.flip(gw, axis=1), axis=1), axis=1) - gw
    d_sigma = g_w * trans * deltas * np.exp(-tau) - deltas * suffix
    return d_sigma, d_rgb


def _ray_batch(images, alphas, cameras, n, rng):
    n_img, height, width = images.shape[:3]
    img = rng.integers(0, n_img, size=n)
    px = rng.integers(0, width, size=n)
    py = rng.integers(0, height, size=n)
    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    for i in np.unique(img):
        sel = img == i
        dirs[sel] = camera_dirs(cameras[i], px[sel], py[sel])
        origins[sel] = cameras[i].position
    return origins, dirs, images[img, py, px], alphas[img, py, px]


def render_field_rays(field: DensityField, origins, dirs, samples_per_ray):
    """Volume-render rays through the unit-cube domain (forward only)."""
    t_near, t_far, hit = aabb_intersect_batch(origins, dirs, SCENE_BOX, 0.0, np.inf)
    n = len(origins)
    color = np.zeros((n, 3))
    alpha = np.zeros(n)
    if not np.any(hit):
        return color, alpha
    tn, tf = t_near[hit], t_far[hit]
    s = samples_per_ray
    frac = (np.arange(s) + 0.5) / s
    ts = tn[:, None] + frac[None, :] * (tf - tn)[:, None]
    deltas = ((tf - tn) / s)[:, None] * np.ones((1, s))
    pts = origins[hit][:, None, :] + ts[..., None] * dirs[hit][:, None, :]
    sigma, rgb = field.query_sigma_rgb(pts.reshape(-1, 3))
    c, a, _, _, _ = composite_rays(
        sigma.reshape(-1, s), deltas, rgb.reshape(-1, s, 3)
    )
    color[hit] = c
    alpha[hit] = a
    return color, alpha


def train_density_field(
    images: np.ndarray,
    alphas: np.ndarray,
    cameras: list[Camera],
    config: DensityConfig,
    rng: np.random.Generator,
    log=None,
):
    """Fit the stage-1 field to posed images; returns (field, loss_log)."""
    if len(cameras) < 2:
        raise DomainError("stage-1 training needs at least 2 posed images")
    field = DensityField.create(config, rng)
    params_feat = field.features
    params_mlp = field.mlp.parameters()
    opt_feat = AdamState(params_feat, lr=config.lr_features,
                         names=[f"density.features[{i}]" for i in range(len(params_feat))])
    opt_mlp = AdamState(params_mlp, lr=config.lr_mlp,
                        names=[f"density.mlp[{i}]" for i in range(len(params_mlp))])

    losses = []
    initial_loss = None
    bad_streak = 0
    s = config.samples_per_ray
    for step in range(config.steps):
        origins, dirs, c_gt, a_gt = _ray_batch(images, alphas, cameras, config.batch_rays, rng)
        t_near, t_far, hit = aabb_intersect_batch(origins, dirs, SCENE_BOX, 0.0, np.inf)
        if not np.any(hit):
            continue
        tn, tf = t_near[hit], t_far[hit]
        frac = (np.arange(s) + 0.5) / s
        ts = tn[:, None] + frac[None, :] * (tf - tn)[:, None]
        deltas = ((tf - tn) / s)[:, None] * np.ones((1, s))
        pts = (origins[hit][:, None, :] + ts[..., None] * dirs[hit][:, None, :]).reshape(-1, 3)

        enc, enc_cache = hashgrid_encode_with_cache(
            field.encoder, field.features, pts.astype(np.float32)
        )
        out, mlp_cache = mlp_forward(field.mlp, enc)
        sigma = out[:, 0].astype(np.float64).reshape(-1, s)
        rgb = out[:, 1:4].astype(np.float64).reshape(-1, s, 3)

        color, alpha, weights, trans, _ = composite_rays(sigma, deltas, rgb)
        miss = ~hit
        n_rays = len(origins)
        err_c = color - c_gt[hit]
        err_a = alpha - a_gt[hit]
        loss = (np.sum(err_c**2) + np.sum(err_a**2)
                + np.sum(c_gt[miss] ** 2) + np.sum(a_gt[miss] ** 2)) / n_rays
        losses.append(float(loss))
        if initial_loss is None:
            initial_loss = max(loss, 1e-9)
        bad_streak = bad_streak + 1 if loss > 1e3 * initial_loss else 0
        if bad_streak >= 100:
            raise TrainingError(f"stage-1 diverged at step {step}: loss {loss:.3g}")

        d_color = 2.0 * err_c / n_rays
        d_alpha = 2.0 * err_a / n_rays
        d_sigma, d_rgb = composite_backward(sigma, deltas, rgb, weights, trans, d_color, d_alpha)
        upstream = np.concatenate(
            [d_sigma.reshape(-1, 1), d_rgb.reshape(-1, 3)], axis=1
        ).astype(np.float32)
        (w_g, b_g), d_enc = mlp_backward(field.mlp, mlp_cache, upstream)
        g_feat = [np.zeros_like(f) for f in field.features]
        hashgrid_backward(field.encoder, enc_cache, d_enc, g_feat)

        adam_step(params_feat, g_feat, opt_feat)
        adam_step(params_mlp, w_g + b_g, opt_mlp)
        if log is not None and step % 50 == 0:
            log(step, float(loss))
    return field, losses
