"""Tiny fully-connected networks with exact backpropagation and Adam.

Gradients are hand-derived for this fixed architecture (affine layers,
rectifier hidden units, per-head output activations); there is no general
autodiff graph.  All math is float32, single-logical-writer during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, camera_dirs
from .errors import DomainError, StateError, TrainingError

HEAD_ACTIVATIONS = ("identity", "sigmoid", "exponential")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class Mlp:
    """Dense layers with rectifier hidden units and tagged output heads.

    ``heads`` is a sequence of (activation, width) pairs partitioning the
    final layer's outputs, e.g. (("sigmoid", 3), ("identity", 1)).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    heads: tuple[tuple[str, int], ...]

    @classmethod
    def create(cls, widths: list[int], heads, rng: np.random.Generator) -> "Mlp":
        heads = tuple((str(a), int(w)) for a, w in heads)
        for act, _ in heads:
            if act not in HEAD_ACTIVATIONS:
                raise DomainError(f"unknown head activation {act!r}")
        if sum(w for _, w in heads) != widths[-1]:
            raise DomainError("head widths must sum to the output width")
        weights, biases = [], []
        for i in range(len(widths) - 1):
            fan_in = widths[i]
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, scale, (widths[i + 1], fan_in)).astype(np.float32))
            biases.append(np.zeros(widths[i + 1], dtype=np.float32))
        return cls(weights=weights, biases=biases, heads=heads)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def set_parameters(self, params: list[np.ndarray]) -> None:
        n = len(self.weights)
        self.weights = [p.reshape(w.shape) for p, w in zip(params[:n], self.weights)]
        self.biases = [p.reshape(b.shape) for p, b in zip(params[n:], self.biases)]


def _apply_heads(mlp: Mlp, z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    i = 0
    for act, w in mlp.heads:
        seg = z[:, i : i + w]
        if act == "identity":
            out[:, i : i + w] = seg
        elif act == "sigmoid":
            out[:, i : i + w] = _sigmoid(seg)
        else:
            out[:, i : i + w] = np.exp(seg)
        i += w
    return out


def mlp_forward(mlp: Mlp, x: np.ndarray):
    """Forward pass; returns (output, cache) with activations retained.

    Math runs in the dtype of the weights (float32 in production).
    """
    x = np.atleast_2d(np.asarray(x, dtype=mlp.weights[0].dtype))
    if x.shape[1] != mlp.input_dim:
        raise DomainError(f"input width {x.shape[1]} != layer width {mlp.input_dim}")
    acts = [x]
    h = x
    n = len(mlp.weights)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w.T + b
        if i < n - 1:
            h = np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)
    out = _apply_heads(mlp, h)
    return out, (acts, out)


def mlp_backward(mlp: Mlp, cache, upstream: np.ndarray):
    """Exact gradients for the retained forward.

    Returns ((weight_grads, bias_grads), input_gradient).
    """
    if cache is None:
        raise StateError("backward requires a retained forward cache")
    acts, out = cache
    upstream = np.atleast_2d(np.asarray(upstream, dtype=mlp.weights[0].dtype))

    dz = np.empty_like(upstream)
    i = 0
    for act, w in mlp.heads:
        seg = upstream[:, i : i + w]
        if act == "identity":
            dz[:, i : i + w] = seg
        elif act == "sigmoid":
            s = out[:, i : i + w]
            dz[:, i : i + w] = seg * s * (1.0 - s)
        else:
            dz[:, i : i + w] = seg * out[:, i : i + w]
        i += w

    w_grads = [None] * len(mlp.weights)
    b_grads = [None] * len(mlp.biases)
    n = len(mlp.weights)
    for layer in range(n - 1, -1, -1):
        h_in = acts[layer]
        if layer < n - 1:
            # acts[layer+1] is the rectified output; zero where the unit was dead
            dz = dz * (acts[layer + 1] > 0)
        w_grads[layer] = dz.T @ h_in
        b_grads[layer] = dz.sum(axis=0)
        dz = dz @ mlp.weights[layer]
    return (w_grads, b_grads), dz


class AdamState:
    """Textbook Adam with bias correction over a list of parameter arrays."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.99, eps=1e-15, names=None):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.names = names or [f"param[{i}]" for i in range(len(params))]


def adam_step(params, grads, state: AdamState) -> None:
    """One in-place Adam update; zero gradients leave parameters untouched."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {state.names[i]} at step {t}")
        m = state.m[i]
        v = state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainBatch:
    """Rays with ground-truth premultiplied color and alpha."""

    origins: np.ndarray  # (B,3)
    dirs: np.ndarray  # (B,3) unit
    rgb: np.ndarray  # (B,3) in [0,1]
    alpha: np.ndarray  # (B,) in [0,1]
    cells: np.ndarray  # (B,) flat error-map cell per ray

    def __len__(self):
        return len(self.origins)


@dataclass
class ErrorMap:
    """Low-resolution per-image sampling weights (EMA of per-ray loss)."""

    weights: np.ndarray  # (n_images, cells_y, cells_x)
    cell_size: int = 8
    floor: float = 1e-3
    rho: float = 0.1

    @classmethod
    def uniform(cls, n_images: int, height: int, width: int, cell_size=8, floor=1e-3, rho=0.1):
        cy = (height + cell_size - 1) // cell_size
        cx = (width + cell_size - 1) // cell_size
        return cls(
            weights=np.ones((n_images, cy, cx), dtype=np.float64),
            cell_size=cell_size,
            floor=floor,
            rho=rho,
        )


def sample_rays(
    error_map: ErrorMap,
    images: np.ndarray,
    alphas: np.ndarray,
    cameras: list[Camera],
    n: int,
    rng: np.random.Generator,
) -> TrainBatch:
    """Draw n training rays: cell by weighted choice, pixel uniform in cell."""
    if n < 1:
        raise DomainError("batch size must be >= 1")
    if len(cameras) == 0:
        raise DomainError("empty training set")
    w = error_map.weights.reshape(-1)
    p = w / w.sum()
    cells = rng.choice(len(w), size=n, p=p)

    n_img, cy, cx = error_map.weights.shape
    img = cells // (cy * cx)
    rest = cells % (cy * cx)
    cell_y = rest // cx
    cell_x = rest % cx
    height, width = images.shape[1:3]
    cs = error_map.cell_size
    py = np.minimum(cell_y * cs + rng.integers(0, cs, size=n), height - 1)
    px = np.minimum(cell_x * cs + rng.integers(0, cs, size=n), width - 1)

    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    for i in np.unique(img):
        sel = img == i
        cam = cameras[i]
        dirs[sel] = camera_dirs(cam, px[sel], py[sel])
        origins[sel] = cam.position
    return TrainBatch(
        origins=origins,
        dirs=dirs,
        rgb=images[img, py, px].astype(np.float32),
        alpha=alphas[img, py, px].astype(np.float32),
        cells=cells,
    )


def update_error_map(error_map: ErrorMap, cells: np.ndarray, losses: np.ndarray) -> None:
    """EMA the mean per-cell ray loss into the map, floored so every cell
    stays sampleable."""
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses < 0):
        raise DomainError("ray losses must be non-negative")
    sums = np.zeros(error_map.weights.size)
    counts = np.zeros(error_map.weights.size)
    np.add.at(sums, cells, losses)
    np.add.at(counts, cells, 1.0)
    touched = counts > 0
    flat = error_map.weights.reshape(-1)
    rho = error_map.rho
    flat[touched] = (1.0 - rho) * flat[touched] + rho * (sums[touched] / counts[touched])
    np.maximum(flat, error_map.floor, out=flat)
