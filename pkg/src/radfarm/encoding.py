"""Spatial feature encoders.

Two encoders share the same query surface (trilinear blend of per-vertex
feature rows over a unit-cube domain):

* ``PshTable``: a single-resolution, collision-free spatial hash over the
  vertex set of a static occupancy grid.  Slot = (h0(p) + offsets[h1(p)]) % m
  with two fixed prime-multiply hashes and a precomputed 1-D offset table.
  Construction is a greedy bucket placement that never trades away
  perfectness; spatial adjacency of slots is best-effort.
* ``HashGridEncoder``: the multiresolution baseline: dense indexing at
  coarse levels, xor-prime hashing at fine levels, per-level features
  concatenated.

Both support exact backward passes: the gradient of each touched feature row
is the trilinear weight times the upstream gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstructionError, DomainError

# Per-axis multipliers for the two hashes (first triple matches the xor-hash
# lineage; second is the classic spatial-hash triple).
PRIMES_H0 = np.array([1, 2654435761, 805459861], dtype=np.uint64)
PRIMES_H1 = np.array([73856093, 19349663, 83492791], dtype=np.uint64)

# Corner offsets of a unit voxel, fixed order (x fastest).
CORNERS = np.array(
    [[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)],
    dtype=np.int64,
)
_CORNER_AX = np.array([0, 1], dtype=np.uint64)
_CX, _CY, _CZ = CORNERS[:, 0], CORNERS[:, 1], CORNERS[:, 2]

_CACHELINE_BYTES = 64
_FEATURE_BYTES = 4  # float32 rows


@dataclass
class OccupancyGrid:
    """Occupied-voxel bitset at resolution N over the unit cube."""

    resolution: int
    occupied: np.ndarray  # (N, N, N) bool

    def __post_init__(self):
        if self.resolution < 2:
            raise DomainError("occupancy resolution must be >= 2")
        if self.occupied.shape != (self.resolution,) * 3:
            raise DomainError("occupancy bitset shape mismatch")

    def vertices(self) -> np.ndarray:
        """Integer coords of every vertex incident to an occupied voxel, (K,3)."""
        n = self.resolution
        flags = np.zeros((n + 1, n + 1, n + 1), dtype=bool)
        occ = self.occupied
        for dx, dy, dz in CORNERS:
            flags[dx : n + dx, dy : n + dy, dz : n + dz] |= occ
        return np.argwhere(flags).astype(np.int64)

    def occupied_count(self) -> int:
        return int(self.occupied.sum())


def occupancy_from_density(density_query, n: int, threshold: float) -> OccupancyGrid:
    """Threshold a density field into an occupancy grid.

    A voxel is occupied iff the max density over its 8 corners and its center
    is >= threshold.  ``density_query`` maps (B,3) points in [0,1]^3 to (B,)
    densities.
    """
    if n < 2:
        raise DomainError("occupancy resolution must be >= 2")
    axis = np.arange(n + 1, dtype=np.float64) / n
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    corner_pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    corner_vals = np.asarray(density_query(corner_pts)).reshape(n + 1, n + 1, n + 1)

    vox_max = np.full((n, n, n), -np.inf)
    for dx, dy, dz in CORNERS:
        np.maximum(vox_max, corner_vals[dx : n + dx, dy : n + dy, dz : n + dz], out=vox_max)

    caxis = (np.arange(n, dtype=np.float64) + 0.5) / n
    cx, cy, cz = np.meshgrid(caxis, caxis, caxis, indexing="ij")
    center_pts = np.stack([cx, cy, cz], axis=-1).reshape(-1, 3)
    center_vals = np.asarray(density_query(center_pts)).reshape(n, n, n)
    np.maximum(vox_max, center_vals, out=vox_max)

    return OccupancyGrid(resolution=n, occupied=vox_max >= threshold)


@dataclass
class PshReport:
    """Construction diagnostics; adjacency is measured, never required."""

    load_factor: float
    adjacency_score: float
    attempts: int
    table_size: int
    offset_size: int


@dataclass
class PshTable:
    """Collision-free spatial hash over a static vertex set."""

    resolution: int  # domain is integer coords in [0, N]^3
    table_size: int  # m
    offset_size: int  # m_phi
    offsets: np.ndarray  # (m_phi,) int64 in [0, m)
    report: PshReport
    primes_h0: np.ndarray = field(default_factory=lambda: PRIMES_H0.copy())
    primes_h1: np.ndarray = field(default_factory=lambda: PRIMES_H1.copy())

    def slots(self, points: np.ndarray) -> np.ndarray:
        """Slot indices for integer points (B,3); no domain check (hot path)."""
        p = np.asarray(points, dtype=np.uint64)
        h0 = (p @ self.primes_h0) % np.uint64(self.table_size)
        h1 = (p @ self.primes_h1) % np.uint64(self.offset_size)
        return ((h0 + self.offsets.astype(np.uint64)[h1]) % np.uint64(self.table_size)).astype(
            np.int64
        )

    def corner_slots(self, base: np.ndarray) -> np.ndarray:
        """Slots of the 8 corners of voxels at `base` (B,3), exploiting that
        both hashes are linear in the point."""
        p = base.astype(np.uint64)
        m = np.uint64(self.table_size)
        mp = np.uint64(self.offset_size)
        corner_h0 = (CORNERS.astype(np.uint64) @ self.primes_h0) % m
        corner_h1 = (CORNERS.astype(np.uint64) @ self.primes_h1) % mp
        h0 = ((p @ self.primes_h0) % m)[:, None] + corner_h0[None, :]
        h1 = (((p @ self.primes_h1) % mp)[:, None] + corner_h1[None, :]) % mp
        return ((h0 + self.offsets.astype(np.uint64)[h1]) % m).astype(np.int64)


def psh_lookup(table: PshTable, p) -> int:
    """Slot for one integer point in [0, N]^3; aliasing allowed off the vertex set."""
    p = np.asarray(p, dtype=np.int64)
    if p.shape != (3,) or np.any(p < 0) or np.any(p > table.resolution):
        raise DomainError(f"point {p} outside hash domain [0, {table.resolution}]^3")
    return int(table.slots(p[None, :])[0])


def _h0_h1(vertices: np.ndarray, m: int, m_phi: int):
    v = vertices.astype(np.uint64)
    return ((v @ PRIMES_H0) % np.uint64(m)).astype(np.int64), (
        (v @ PRIMES_H1) % np.uint64(m_phi)
    ).astype(np.int64)


def _try_construct(vertices: np.ndarray, resolution: int, m: int, m_phi: int):
    """One greedy placement attempt; returns (offsets, slots) or None."""
    h0, h1 = _h0_h1(vertices, m, m_phi)

    order = np.argsort(h1, kind="stable")
    sorted_h1 = h1[order]
    starts = np.flatnonzero(np.r_[True, sorted_h1[1:] != sorted_h1[:-1]])
    ends = np.r_[starts[1:], len(order)]
    sizes = ends - starts
    bucket_order = np.argsort(-sizes, kind="stable")

    occupied = np.zeros(m, dtype=bool)
    offsets = np.zeros(m_phi, dtype=np.int64)
    slots = np.full(len(vertices), -1, dtype=np.int64)

    # Dense vertex-id -> slot map enables cheap neighbor lookups for the
    # adjacency preference; skipped for very large domains.
    side = resolution + 1
    use_adjacency = side**3 <= 32_000_000
    vid_to_slot = np.full(side**3, -1, dtype=np.int64) if use_adjacency else None
    vids = (vertices[:, 0] * side + vertices[:, 1]) * side + vertices[:, 2]

    neighbor_steps = np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
        dtype=np.int64,
    )
    chunk = 64

    for b in bucket_order:
        members = order[starts[b] : ends[b]]
        h0s = h0[members]
        srt = np.sort(h0s)
        if np.any(srt[1:] == srt[:-1]):
            return None  # two bucket vertices share h0: no offset can separate them

        # Slots of already-placed grid neighbors, used only to rank feasible
        # offsets; perfectness always wins.
        pair_h0 = pair_target = None
        if use_adjacency:
            verts = vertices[members]
            nbrs = verts[:, None, :] + neighbor_steps[None, :, :]
            valid = np.all((nbrs >= 0) & (nbrs <= resolution), axis=-1)
            nvids = (nbrs[..., 0] * side + nbrs[..., 1]) * side + nbrs[..., 2]
            nslots = np.where(valid, vid_to_slot[np.where(valid, nvids, 0)], -1)
            has = nslots >= 0
            if np.any(has):
                vidx, _ = np.nonzero(has)
                pair_h0 = h0s[vidx]
                pair_target = nslots[has]

        chosen = -1
        best_score = np.inf
        # Targeted candidates first: offsets that would land a bucket vertex
        # right next to an already-placed neighbor.
        if pair_h0 is not None and len(pair_h0) > 0:
            cand = np.unique(
                np.concatenate(
                    [(pair_target + 1 - pair_h0) % m, (pair_target - 1 - pair_h0) % m]
                )
            )[:16]
            cand_slots = (h0s[None, :] + cand[:, None]) % m
            feasible = ~occupied[cand_slots].any(axis=1)
            if np.any(feasible):
                feas = cand[feasible]
                d = np.abs((pair_h0[None, :] + feas[:, None]) % m - pair_target[None, :])
                scores = np.minimum(d, m - d).mean(axis=1)
                k = int(np.argmin(scores))
                chosen, best_score = int(feas[k]), float(scores[k])

        if chosen < 0:
            for start in range(0, m, chunk):
                offs = np.arange(start, min(start + chunk, m), dtype=np.int64)
                cand_slots = (h0s[None, :] + offs[:, None]) % m
                feasible = ~occupied[cand_slots].any(axis=1)
                if not np.any(feasible):
                    continue
                feas = offs[feasible]
                if pair_h0 is not None and len(pair_h0) > 0:
                    d = np.abs((pair_h0[None, :] + feas[:, None]) % m - pair_target[None, :])
                    scores = np.minimum(d, m - d).mean(axis=1)
                    k = int(np.argmin(scores))
                    chosen = int(feas[k])
                else:
                    chosen = int(feas[0])
                break
            if chosen < 0:
                return None

        final = (h0s + chosen) % m
        occupied[final] = True
        offsets[sorted_h1[starts[b]]] = chosen
        slots[members] = final
        if use_adjacency:
            vid_to_slot[vids[members]] = final

    return offsets, slots


def _adjacency_score(vertices, slots, resolution, window):
    """Fraction of grid-adjacent vertex pairs within `window` slots of each other."""
    side = resolution + 1
    vid_to_slot = np.full(side**3, -1, dtype=np.int64)
    vids = (vertices[:, 0] * side + vertices[:, 1]) * side + vertices[:, 2]
    vid_to_slot[vids] = slots
    total = close = 0
    for axis in range(3):
        step = np.zeros(3, dtype=np.int64)
        step[axis] = 1
        nbr = vertices + step
        ok = nbr[:, axis] <= resolution
        nvid = (nbr[ok, 0] * side + nbr[ok, 1]) * side + nbr[ok, 2]
        nslot = vid_to_slot[nvid]
        present = nslot >= 0
        total += int(present.sum())
        close += int((np.abs(slots[ok][present] - nslot[present]) <= window).sum())
    return close / total if total else 1.0


def psh_construct(
    vertices: np.ndarray,
    resolution: int,
    table_size: int | None = None,
    offset_size: int | None = None,
    load_factor: float = 1.05,
    max_retries: int = 8,
    features_per_row: int = 2,
) -> PshTable:
    """Build a collision-free hash over a vertex set.

    Buckets (vertices sharing h1) are placed in decreasing-population order;
    each bucket takes the first feasible offset unless a feasible offset
    lands its vertices nearer to already-placed grid neighbors.  On failure
    the offset table grows x1.5 and the slot table x1.1, up to
    ``max_retries`` extra attempts.
    """
    vertices = np.asarray(vertices, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or len(vertices) == 0:
        raise DomainError("vertex set must be a non-empty (K,3) array")
    if np.any(vertices < 0) or np.any(vertices > resolution):
        raise DomainError("vertices must lie in [0, N]^3")
    vertices = np.unique(vertices, axis=0)

    k = len(vertices)
    m_pinned = table_size is not None
    m0 = table_size if m_pinned else max(1, math.ceil(k * load_factor))
    mphi0 = offset_size if offset_size is not None else max(1, k // 3)

    attempted = []
    for attempt in range(max_retries + 1):
        # The offset table is the heuristic's degree of freedom and always
        # grows on retry; a caller-pinned slot table size stays pinned.
        m = m0 if m_pinned else max(k, math.ceil(m0 * 1.1**attempt))
        m_phi = math.ceil(mphi0 * 1.5**attempt)
        attempted.append((m, m_phi))
        result = _try_construct(vertices, resolution, m, m_phi)
        if result is None:
            continue
        offsets, slots = result
        window = max(1, _CACHELINE_BYTES // (_FEATURE_BYTES * features_per_row))
        report = PshReport(
            load_factor=k / m,
            adjacency_score=_adjacency_score(vertices, slots, resolution, window),
            attempts=attempt + 1,
            table_size=m,
            offset_size=m_phi,
        )
        table = PshTable(
            resolution=resolution,
            table_size=m,
            offset_size=m_phi,
            offsets=offsets,
            report=report,
        )
        # Perfectness is a hard postcondition: verify exhaustively.
        check = table.slots(vertices)
        if not np.array_equal(check, slots) or len(np.unique(slots)) != k:
            raise ConstructionError("internal verification failed", attempted)
        return table
    raise ConstructionError(
        f"no collision-free table within {max_retries} retries for |V|={k}", attempted
    )


def init_features(rows: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Learnable feature rows, small uniform init."""
    return rng.uniform(-1e-4, 1e-4, size=(rows, dim)).astype(np.float32)


def _base_weights(x: np.ndarray, resolution: int):
    """Base voxel coords (B,3) and trilinear corner weights (B,8)."""
    scaled = np.asarray(x) * resolution
    base = np.minimum(np.floor(scaled).astype(np.int64), resolution - 1)
    base = np.maximum(base, 0)
    frac = scaled - base
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    # column order matches CORNERS (x is bit 0, y bit 1, z bit 2)
    w = np.empty((len(base), 8), dtype=scaled.dtype)
    gygz, fygz, gyfz, fyfz = gy * gz, fy * gz, gy * fz, fy * fz
    w[:, 0] = gx * gygz
    w[:, 1] = fx * gygz
    w[:, 2] = gx * fygz
    w[:, 3] = fx * fygz
    w[:, 4] = gx * gyfz
    w[:, 5] = fx * gyfz
    w[:, 6] = gx * fyfz
    w[:, 7] = fx * fyfz
    return base, w


def _corner_weights(x: np.ndarray, resolution: int):
    """Voxel corner coords (B,8,3) and trilinear weights (B,8) for x in [0,1]^3."""
    base, w = _base_weights(x, resolution)
    corners = base[:, None, :] + CORNERS[None, :, :]
    return corners, w


def _scatter_add(grad: np.ndarray, idx: np.ndarray, contrib: np.ndarray) -> None:
    """grad[idx] += contrib row-wise (bincount is far faster than ufunc.at)."""
    idx = idx.reshape(-1)
    for d in range(grad.shape[1]):
        grad[:, d] += np.bincount(idx, weights=contrib[:, d], minlength=len(grad)).astype(
            grad.dtype, copy=False
        )


def psh_encode(table: PshTable, features: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Trilinear blend of the 8 corner feature rows for x (B,3) in [0,1]^3."""
    out, _ = psh_encode_with_cache(table, features, x)
    return out


def psh_encode_with_cache(table: PshTable, features: np.ndarray, x: np.ndarray):
    base, w = _base_weights(np.atleast_2d(x), table.resolution)
    slots = table.corner_slots(base)
    out = np.einsum("bcf,bc->bf", features[slots], w)
    return out.astype(features.dtype), (slots, w)


def psh_backward(cache, upstream: np.ndarray, grad_features: np.ndarray) -> None:
    """Accumulate d(loss)/d(feature rows): trilinear weight x upstream."""
    slots, w = cache
    upstream = np.atleast_2d(upstream)
    contrib = w[..., None] * upstream[:, None, :]
    _scatter_add(grad_features, slots, contrib.reshape(-1, upstream.shape[-1]))


@dataclass
class HashGridEncoder:
    """Multiresolution grid encoder: dense at coarse levels, hashed at fine."""

    levels: int
    base_resolution: int
    growth: float
    table_size: int
    features_per_level: int

    def __post_init__(self):
        self.resolutions = [
            max(2, int(math.floor(self.base_resolution * self.growth**l)))
            for l in range(self.levels)
        ]
        self.dense = [(n + 1) ** 3 <= self.table_size for n in self.resolutions]
        self.row_counts = [
            (n + 1) ** 3 if d else self.table_size
            for n, d in zip(self.resolutions, self.dense)
        ]
        # Per-level corner index deltas for the dense layout.
        self._dense_corner_offsets = [
            (CORNERS[:, 0] * (n + 1) + CORNERS[:, 1]) * (n + 1) + CORNERS[:, 2]
            for n in self.resolutions
        ]

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def init_features(self, rng: np.random.Generator) -> list[np.ndarray]:
        return [init_features(r, self.features_per_level, rng) for r in self.row_counts]

    def level_indices(self, level: int, corners: np.ndarray) -> np.ndarray:
        n = self.resolutions[level]
        if self.dense[level]:
            side = n + 1
            return (corners[..., 0] * side + corners[..., 1]) * side + corners[..., 2]
        c = corners.astype(np.uint64)
        h = c[..., 0] * PRIMES_H0[0] ^ c[..., 1] * PRIMES_H0[1] ^ c[..., 2] * PRIMES_H0[2]
        return (h % np.uint64(self.table_size)).astype(np.int64)

    def corner_indices(self, level: int, base: np.ndarray) -> np.ndarray:
        """Indices of a voxel's 8 corners, (B,3) base -> (B,8)."""
        n = self.resolutions[level]
        if self.dense[level]:
            side = n + 1
            flat = (base[:, 0] * side + base[:, 1]) * side + base[:, 2]
            return flat[:, None] + self._dense_corner_offsets[level][None, :]
        b = base.astype(np.uint64)
        ax = (b[:, 0:1] + _CORNER_AX[None, :]) * PRIMES_H0[0]
        ay = (b[:, 1:2] + _CORNER_AX[None, :]) * PRIMES_H0[1]
        az = (b[:, 2:3] + _CORNER_AX[None, :]) * PRIMES_H0[2]
        h = ax[:, _CX] ^ ay[:, _CY] ^ az[:, _CZ]
        return (h % np.uint64(self.table_size)).astype(np.int64)


def hashgrid_encode(enc: HashGridEncoder, features: list[np.ndarray], x: np.ndarray):
    out, _ = hashgrid_encode_with_cache(enc, features, x)
    return out


def hashgrid_encode_with_cache(enc: HashGridEncoder, features: list[np.ndarray], x: np.ndarray):
    """Per-level trilinear interpolation, concatenated in level order."""
    x = np.atleast_2d(x)
    f = enc.features_per_level
    out = np.empty((len(x), enc.levels * f), dtype=features[0].dtype)
    caches = []
    for level in range(enc.levels):
        base, w = _base_weights(x, enc.resolutions[level])
        idx = enc.corner_indices(level, base)
        out[:, level * f : (level + 1) * f] = np.einsum("bcf,bc->bf", features[level][idx], w)
        caches.append((idx, w))
    return out, caches


def hashgrid_backward(
    enc: HashGridEncoder, caches, upstream: np.ndarray, grad_features: list[np.ndarray]
) -> None:
    upstream = np.atleast_2d(upstream)
    f = enc.features_per_level
    for level, (idx, w) in enumerate(caches):
        seg = upstream[:, level * f : (level + 1) * f]
        contrib = w[..., None] * seg[:, None, :]
        _scatter_add(grad_features[level], idx, contrib.reshape(-1, f))
