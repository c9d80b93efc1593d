"""Exact spatial operators: KNN, farthest point sampling and grid/FPS resampling maps.

Squared distances are always evaluated as ``dx*dx + dy*dy + dz*dz`` with
``d = source - query`` so that every backend sees bit-identical values, and
ties are broken by the lower source index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange


@dataclass(frozen=True)
class NeighborTable:
    """Row ``i`` lists the ``k`` nearest source points of query ``i``, nearest first."""

    indices: np.ndarray
    source_scale: int = 0
    query_scale: int = 0

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class ResampleMap:
    """Transport between a fine point set and the coarse set derived from it.

    ``order``/``offsets`` list the fine members of every coarse point as
    contiguous segments (``order[offsets[c]:offsets[c + 1]]``); pooling
    reduces over those segments in that order.
    """

    down_assign: np.ndarray
    coarse_coords: np.ndarray
    up_neighbors: np.ndarray
    up_weights: np.ndarray
    kind: str
    order: np.ndarray
    offsets: np.ndarray

    @property
    def num_fine(self) -> int:
        return self.down_assign.shape[0]

    @property
    def num_coarse(self) -> int:
        return self.coarse_coords.shape[0]

    def members(self, c: int) -> np.ndarray:
        return self.order[self.offsets[c]:self.offsets[c + 1]]


def _as_coords(coords, name="coords") -> np.ndarray:
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"{name} must be an (N, 3) array, got shape {coords.shape}")
    if not np.isfinite(coords).all():
        raise ValueError(f"{name} contains non-finite values")
    return coords


def squared_distances(source: np.ndarray, query: np.ndarray) -> np.ndarray:
    """(Q, P) squared distances with the canonical evaluation order."""
    dx = source[None, :, 0] - query[:, None, 0]
    dy = source[None, :, 1] - query[:, None, 1]
    dz = source[None, :, 2] - query[:, None, 2]
    out = dx * dx
    out += dy * dy
    out += dz * dz
    return out


# ---------------------------------------------------------------------------
# KNN


def _knn_brute(source, query, k):
    q = query.shape[0]
    out = np.empty((q, k), dtype=np.int64)
    step = max(1, 4_000_000 // max(source.shape[0], 1))
    for start in range(0, q, step):
        d2 = squared_distances(source, query[start:start + step])
        # stable sort keeps equal distances in ascending source order
        out[start:start + step] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


@njit(cache=True, parallel=True)
def _grid_knn_kernel(source, query, k, origin, cell, dims, cell_start, sorted_idx, tol):
    nq = query.shape[0]
    nx, ny, nz = dims[0], dims[1], dims[2]
    max_ring = max(nx, max(ny, nz))
    out = np.empty((nq, k), dtype=np.int64)
    for qi in prange(nq):
        best_d = np.full(k, np.inf)
        best_i = np.full(k, -1, dtype=np.int64)
        count = 0
        qx = query[qi, 0]
        qy = query[qi, 1]
        qz = query[qi, 2]
        cx = min(max(int(np.floor((qx - origin[0]) / cell)), 0), nx - 1)
        cy = min(max(int(np.floor((qy - origin[1]) / cell)), 0), ny - 1)
        cz = min(max(int(np.floor((qz - origin[2]) / cell)), 0), nz - 1)
        r = 0
        while True:
            for ix in range(cx - r, cx + r + 1):
                if ix < 0 or ix >= nx:
                    continue
                for iy in range(cy - r, cy + r + 1):
                    if iy < 0 or iy >= ny:
                        continue
                    full_column = abs(ix - cx) == r or abs(iy - cy) == r
                    step = 1 if full_column else max(2 * r, 1)
                    for iz in range(cz - r, cz + r + 1, step):
                        if iz < 0 or iz >= nz:
                            continue
                        cid = ix + nx * (iy + ny * iz)
                        for p in range(cell_start[cid], cell_start[cid + 1]):
                            j = sorted_idx[p]
                            dx = source[j, 0] - qx
                            dy = source[j, 1] - qy
                            dz = source[j, 2] - qz
                            d = dx * dx + dy * dy + dz * dz
                            if count == k:
                                last = k - 1
                                if d > best_d[last] or (d == best_d[last] and j > best_i[last]):
                                    continue
                                pos = last
                            else:
                                pos = count
                                count += 1
                            while pos > 0 and (best_d[pos - 1] > d or
                                               (best_d[pos - 1] == d and best_i[pos - 1] > j)):
                                best_d[pos] = best_d[pos - 1]
                                best_i[pos] = best_i[pos - 1]
                                pos -= 1
                            best_d[pos] = d
                            best_i[pos] = j
            if r >= max_ring:
                break
            if count == k:
                # anything outside the scanned cube is at least r cells away
                bound = r * cell - tol
                if bound > 0.0 and best_d[k - 1] < bound * bound:
                    break
            r += 1
        for n in range(k):
            out[qi, n] = best_i[n]
    return out


class GridHash:
    """Uniform spatial hash over a fixed source set (dense cell table)."""

    def __init__(self, source: np.ndarray, points_per_cell: float = 2.0):
        source = _as_coords(source, "source")
        self.source = source
        n = source.shape[0]
        lo = source.min(axis=0)
        ext = source.max(axis=0) - lo
        scale = float(ext.max())
        live = ext > 1e-12 * scale if scale > 0 else np.zeros(3, dtype=bool)
        if not live.any():
            cell = 1.0
        else:
            target = max(n / points_per_cell, 1.0)
            cell = float(np.prod(ext[live]) / target) ** (1.0 / live.sum())
            cell = max(cell, scale * 1e-9)
        while True:
            dims = (np.floor(ext / cell).astype(np.int64) + 1)
            if int(np.prod(dims)) <= 4 * n + 64:
                break
            cell *= 1.25
        self.origin = lo
        self.cell = cell
        self.dims = dims
        ids = np.minimum(np.floor((source - lo) / cell).astype(np.int64), dims - 1)
        cid = ids[:, 0] + dims[0] * (ids[:, 1] + dims[1] * ids[:, 2])
        self.sorted_idx = np.argsort(cid, kind="stable").astype(np.int64)
        counts = np.bincount(cid, minlength=int(np.prod(dims)))
        self.cell_start = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        self.tol = 1e-9 * (float(np.abs(source).max()) + cell)

    def query(self, query: np.ndarray, k: int) -> np.ndarray:
        query = _as_coords(query, "query")
        return _grid_knn_kernel(self.source, query, k, self.origin, self.cell, self.dims,
                                self.cell_start, self.sorted_idx, self.tol)


def knn_query(source_coords, query_coords, k: int, backend: str = "grid",
              source_scale: int = 0, query_scale: int = 0) -> NeighborTable:
    """Exact ``k`` nearest neighbors of every query point among the source points."""
    source = _as_coords(source_coords, "source_coords")
    query = _as_coords(query_coords, "query_coords")
    if k < 1 or k > source.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {source.shape[0]}] (number of source points)")
    if backend == "brute":
        idx = _knn_brute(source, query, k)
    elif backend == "grid":
        idx = GridHash(source).query(query, k)
    else:
        raise ValueError(f"unknown knn backend {backend!r}")
    return NeighborTable(idx, source_scale, query_scale)


# ---------------------------------------------------------------------------
# Farthest point sampling


@njit(cache=True)
def _fps_kernel(coords, m, seed):
    n = coords.shape[0]
    selected = np.empty(m, dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    mind = np.full(n, np.inf)
    cur = seed
    for t in range(m):
        selected[t] = cur
        taken[cur] = True
        if t == m - 1:
            break
        best = -1
        best_d = -1.0
        for j in range(n):
            if taken[j]:
                continue
            dx = coords[j, 0] - coords[cur, 0]
            dy = coords[j, 1] - coords[cur, 1]
            dz = coords[j, 2] - coords[cur, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            if mind[j] > best_d:
                best_d = mind[j]
                best = j
        cur = best
    return selected


def lexicographic_first(coords: np.ndarray) -> int:
    order = np.lexsort((np.arange(len(coords)), coords[:, 2], coords[:, 1], coords[:, 0]))
    return int(order[0])


def fps_select(coords, m: int) -> np.ndarray:
    """Greedy farthest point sampling seeded at the lexicographically smallest point."""
    coords = _as_coords(coords)
    if m < 1 or m > coords.shape[0]:
        raise ValueError(f"m={m} must lie in [1, {coords.shape[0]}]")
    return _fps_kernel(coords, m, lexicographic_first(coords))


# ---------------------------------------------------------------------------
# Resampling maps


@njit(cache=True)
def _segment_shifted_mean(data, offsets):
    # mean = first member + mean offset from it; exact on constant segments
    nseg = offsets.shape[0] - 1
    c = data.shape[1]
    out = np.empty((nseg, c))
    for s in range(nseg):
        a = offsets[s]
        b = offsets[s + 1]
        count = b - a
        for ch in range(c):
            first = data[a, ch]
            acc = 0.0
            for p in range(a, b):
                acc = acc + (data[p, ch] - first)
            out[s, ch] = first + acc / count
    return out


@njit(cache=True)
def _segment_max(data, offsets):
    nseg = offsets.shape[0] - 1
    c = data.shape[1]
    out = np.empty((nseg, c))
    for s in range(nseg):
        a = offsets[s]
        for ch in range(c):
            best = data[a, ch]
            for p in range(a + 1, offsets[s + 1]):
                if data[p, ch] > best:
                    best = data[p, ch]
            out[s, ch] = best
    return out


def cell_keys(coords: np.ndarray, cell_size: float) -> np.ndarray:
    return np.floor(coords / cell_size).astype(np.int64)


def grid_pool_map(coords, cell_size: float) -> ResampleMap:
    """Partition points into half-open cubic cells anchored at the origin.

    One coarse point per non-empty cell, ordered by cell key; members of a
    cell are ordered by coordinates (then index), which makes the centroids
    independent of the input order.
    """
    coords = _as_coords(coords)
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    keys = cell_keys(coords, cell_size)
    n = coords.shape[0]
    order = np.lexsort((np.arange(n), coords[:, 2], coords[:, 1], coords[:, 0],
                        keys[:, 2], keys[:, 1], keys[:, 0])).astype(np.int64)
    sk = keys[order]
    starts = np.flatnonzero(np.concatenate(([True], (sk[1:] != sk[:-1]).any(axis=1))))
    offsets = np.concatenate((starts, [n])).astype(np.int64)
    seg = np.repeat(np.arange(len(starts), dtype=np.int64), np.diff(offsets))
    down = np.empty(n, dtype=np.int64)
    down[order] = seg
    coarse = _segment_shifted_mean(coords[order], offsets)
    return ResampleMap(down, coarse, down[:, None].copy(), np.ones((n, 1)), "grid",
                       order, offsets)


def fps_knn_map(fine_coords, m: int, interp_k: int = 3, backend: str = "grid") -> ResampleMap:
    """FPS-selected coarse points with nearest-parent pooling and inverse-square interpolation."""
    fine = _as_coords(fine_coords, "fine_coords")
    sel = fps_select(fine, m)
    if interp_k < 1 or interp_k > m:
        raise ValueError(f"interp_k={interp_k} must lie in [1, {m}]")
    coarse = fine[sel]
    up = knn_query(coarse, fine, interp_k, backend=backend).indices
    down = up[:, 0].copy()
    diff = coarse[up] - fine[:, None, :]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    weights = np.zeros_like(d2)
    hit = d2[:, 0] == 0.0
    weights[hit, 0] = 1.0
    inv = 1.0 / d2[~hit]
    weights[~hit] = inv / inv.sum(axis=1, keepdims=True)
    order = np.argsort(down, kind="stable").astype(np.int64)
    counts = np.bincount(down, minlength=m)
    offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return ResampleMap(down, coarse, up, weights, "fps_knn", order, offsets)


def pool_features(fine, rmap: ResampleMap, reduce: str = "max") -> np.ndarray:
    """Reduce fine rows onto their coarse parent, per channel."""
    fine = np.asarray(fine, dtype=np.float64)
    if fine.ndim != 2 or fine.shape[0] != rmap.num_fine:
        raise ValueError(f"expected ({rmap.num_fine}, C) features, got {fine.shape}")
    data = np.ascontiguousarray(fine[rmap.order])
    if reduce == "max":
        return _segment_max(data, rmap.offsets)
    if reduce == "mean":
        return _segment_shifted_mean(data, rmap.offsets)
    raise ValueError(f"unknown reduce {reduce!r}")


def unpool_features(coarse, rmap: ResampleMap) -> np.ndarray:
    """Back-project (grid) or interpolate (fps_knn) coarse rows to the fine points."""
    coarse = np.asarray(coarse, dtype=np.float64)
    if coarse.ndim != 2 or coarse.shape[0] != rmap.num_coarse:
        raise ValueError(f"expected ({rmap.num_coarse}, C) features, got {coarse.shape}")
    if rmap.kind == "grid":
        return coarse[rmap.down_assign]
    w = rmap.up_weights
    nb = rmap.up_neighbors
    out = w[:, 0:1] * coarse[nb[:, 0]]
    for n in range(1, nb.shape[1]):
        out = out + w[:, n:n + 1] * coarse[nb[:, n]]
    return out
