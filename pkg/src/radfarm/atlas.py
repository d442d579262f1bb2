"""Two-level sparse sample caches ("texture cubes").

A ``CubeAtlas`` is a base index grid of resolution b whose non-empty cells
point into a pool of dense cubes.  Each cube stores (r+1)^3 corner-aligned
samples covering its cell, sharing boundary samples with neighbors so
trilinear interpolation is C0 across cube faces.  Atlases cache either
density (1 channel) or diffuse RGB + tint (4 channels).

Queries at stored sample positions reproduce the baked field bit-exactly
when b and r are powers of two (the defaults), because every sample
coordinate is then a dyadic rational.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

EMPTY_CELL = -1


@dataclass
class CubeAtlas:
    base_resolution: int
    cube_resolution: int
    channels: int
    index: np.ndarray  # (b, b, b) int32, EMPTY_CELL or cube id
    cubes: np.ndarray  # (n_cubes, r+1, r+1, r+1, channels) float32

    def __post_init__(self):
        b = self.base_resolution
        if self.index.shape != (b, b, b):
            raise DomainError("index grid shape mismatch")
        if self.cubes.ndim != 5 or self.cubes.shape[4] != self.channels:
            raise DomainError("cube pool shape mismatch")
        used = self.index[self.index != EMPTY_CELL]
        if used.size and (used.min() < 0 or used.max() >= len(self.cubes)):
            raise DomainError("index entries must reference valid cubes")

    @property
    def cube_count(self) -> int:
        return len(self.cubes)

    def occupied_cells(self) -> np.ndarray:
        return self.index != EMPTY_CELL

    def nbytes(self) -> int:
        return self.index.nbytes + self.cubes.nbytes


def sample_positions(b: int, r: int) -> np.ndarray:
    """All distinct sample coordinates along one axis, shape (b*r + 1,)."""
    return np.arange(b * r + 1, dtype=np.float64) / (b * r)


def bake_cubes(
    query,
    b: int,
    r: int,
    channels: int = 1,
    threshold: float = 0.0,
    relative_threshold: float = 0.0,
    cell_mask: np.ndarray | None = None,
    chunk: int = 65_536,
) -> CubeAtlas:
    """Bake a field into a sparse cube atlas.

    Without ``cell_mask`` a cell is allocated iff any of its samples of
    channel 0 exceeds max(threshold, relative_threshold * global max).
    With a mask, exactly the masked cells are allocated (diffuse shells).
    ``query`` maps (B,3) points to (B,) or (B,channels) values.
    """
    if b < 8 and cell_mask is None:
        raise DomainError("base resolution must be >= 8")
    if r < 2:
        raise DomainError("cube resolution must be >= 2")
    side = b * r + 1
    if cell_mask is not None:
        # Masked bakes evaluate only the masked cells' samples (the diffuse
        # shell is thin; a full-grid sweep would dominate bake time).
        if cell_mask.shape != (b, b, b):
            raise DomainError("cell mask shape mismatch")
        return _bake_masked(query, b, r, channels, cell_mask.astype(bool), chunk)

    if side**3 * channels * 4 > 2 * 1024**3:
        raise DomainError(
            f"bake grid {side}^3 x{channels} exceeds the 2 GiB desk-scale budget; "
            "reduce b or r"
        )
    axis = sample_positions(b, r)

    # Evaluate the global corner grid slab-by-slab to bound memory.
    grid = np.empty((side, side, side, channels), dtype=np.float32)
    rows_per_chunk = max(1, chunk // (side * side))
    for x0 in range(0, side, rows_per_chunk):
        x1 = min(side, x0 + rows_per_chunk)
        gx, gy, gz = np.meshgrid(axis[x0:x1], axis, axis, indexing="ij")
        pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        vals = np.asarray(query(pts), dtype=np.float32)
        grid[x0:x1] = vals.reshape(x1 - x0, side, side, channels)

    # Per-cell max over its (r+1)^3 samples of channel 0.
    ch0 = grid[..., 0]
    cell_max = np.full((b, b, b), -np.inf, dtype=np.float32)
    for dx in range(r + 1):
        for dy in range(r + 1):
            for dz in range(r + 1):
                view = ch0[dx :: r, dy :: r, dz :: r][:b, :b, :b]
                np.maximum(cell_max, view, out=cell_max)
    thr = threshold
    if relative_threshold > 0 and ch0.size:
        thr = max(thr, relative_threshold * float(ch0.max()))
    alloc = cell_max > thr

    index = np.full((b, b, b), EMPTY_CELL, dtype=np.int32)
    cells = np.argwhere(alloc)
    cubes = np.empty((len(cells), r + 1, r + 1, r + 1, channels), dtype=np.float32)
    for cid, (i, j, k) in enumerate(cells):
        index[i, j, k] = cid
        cubes[cid] = grid[i * r : i * r + r + 1, j * r : j * r + r + 1, k * r : k * r + r + 1]
    return CubeAtlas(
        base_resolution=b, cube_resolution=r, channels=channels, index=index, cubes=cubes
    )


def _bake_masked(query, b, r, channels, mask, chunk) -> CubeAtlas:
    """Allocate exactly the masked cells, evaluating only their samples."""
    cells = np.argwhere(mask)
    index = np.full((b, b, b), EMPTY_CELL, dtype=np.int32)
    cubes = np.empty((len(cells), r + 1, r + 1, r + 1, channels), dtype=np.float32)
    if len(cells) == 0:
        return CubeAtlas(
            base_resolution=b, cube_resolution=r, channels=channels, index=index, cubes=cubes
        )
    g = np.arange(r + 1, dtype=np.float64) / r
    gx, gy, gz = np.meshgrid(g, g, g, indexing="ij")
    local = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)  # ((r+1)^3, 3)
    per_cell = len(local)
    cells_per_chunk = max(1, chunk // per_cell)
    for c0 in range(0, len(cells), cells_per_chunk):
        c1 = min(len(cells), c0 + cells_per_chunk)
        block = cells[c0:c1]
        pts = ((block[:, None, :] + local[None, :, :]) / b).reshape(-1, 3)
        vals = np.asarray(query(pts), dtype=np.float32).reshape(
            c1 - c0, r + 1, r + 1, r + 1, channels
        )
        cubes[c0:c1] = vals
    for cid, (i, j, k) in enumerate(cells):
        index[i, j, k] = cid
    return CubeAtlas(
        base_resolution=b, cube_resolution=r, channels=channels, index=index, cubes=cubes
    )


def query_atlas(atlas: CubeAtlas, x: np.ndarray) -> np.ndarray:
    """Trilinear interpolation within the containing cube; empty cells give 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b, r = atlas.base_resolution, atlas.cube_resolution
    scaled = x * b
    cell = np.clip(np.floor(scaled).astype(np.int64), 0, b - 1)
    cid = atlas.index[cell[:, 0], cell[:, 1], cell[:, 2]]
    out = np.zeros((len(x), atlas.channels), dtype=np.float32)
    hit = cid != EMPTY_CELL
    if not np.any(hit):
        return out

    local = (scaled[hit] - cell[hit]) * r
    base = np.clip(np.floor(local).astype(np.int64), 0, r - 1)
    frac = local - base
    cubes = atlas.cubes
    acc = np.zeros((hit.sum(), atlas.channels), dtype=np.float64)
    ids = cid[hit]
    for c in range(8):
        dx, dy, dz = (c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1
        w = (
            (frac[:, 0] if dx else 1.0 - frac[:, 0])
            * (frac[:, 1] if dy else 1.0 - frac[:, 1])
            * (frac[:, 2] if dz else 1.0 - frac[:, 2])
        )
        acc += w[:, None] * cubes[ids, base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz]
    out[hit] = acc.astype(np.float32)
    return out


def query_density(atlas: CubeAtlas, x: np.ndarray) -> np.ndarray:
    """Density at x in [0,1]^3; sentinel cells return 0."""
    if atlas.channels != 1:
        raise DomainError("query_density requires a 1-channel atlas")
    return query_atlas(atlas, x)[:, 0]


class DensitySource:
    """What the ray marcher consumes: density plus an activity mask.

    ``sample`` returns (sigma, active); inactive samples are skipped by the
    march's instrumentation (empty-space skipping).
    """

    def sample(self, x: np.ndarray):
        raise NotImplementedError


class AtlasSource(DensitySource):
    def __init__(self, atlas: CubeAtlas):
        self.atlas = atlas

    def sample(self, x):
        b = self.atlas.base_resolution
        cell = np.clip(np.floor(x * b).astype(np.int64), 0, b - 1)
        active = self.atlas.index[cell[:, 0], cell[:, 1], cell[:, 2]] != EMPTY_CELL
        sigma = np.zeros(len(x), dtype=np.float64)
        if np.any(active):
            sigma[active] = query_density(self.atlas, x[active])
        return sigma, active


class AnalyticSource(DensitySource):
    """Direct analytic density queries; every in-domain sample is active."""

    def __init__(self, density_fn):
        self.density_fn = density_fn

    def sample(self, x):
        return np.asarray(self.density_fn(x), dtype=np.float64), np.ones(len(x), dtype=bool)
