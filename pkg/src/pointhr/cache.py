"""Precomputed neighbor tables and resampling maps for every resolution of one cloud.

The network asks an *index provider* for neighbor tables and resampling
chains.  :class:`CachedIndex` serves them from an :class:`IndexCache` built
once per cloud; :class:`OnTheFlyIndex` recomputes them at every request, the
way each operator would if it fetched its own indices.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .core import DegenerateInputError, PointCloud
from .spatial import NeighborTable, ResampleMap, fps_knn_map, grid_pool_map, knn_query

NUM_SCALES = 5


def down_map(coords: np.ndarray, config: ModelConfig, scale: int) -> ResampleMap:
    """Map from ``scale`` to ``scale + 1``."""
    if config.sampler == "grid":
        return grid_pool_map(coords, config.grid_sizes[scale])
    m = max(1, math.ceil(len(coords) / config.fps_ratio))
    return fps_knn_map(coords, m, interp_k=min(3, m))


def neighbor_table(coords: np.ndarray, config: ModelConfig, scale: int) -> NeighborTable:
    # coarse levels may hold fewer points than K; every point then sees all of them
    k = min(config.knn_k(scale), len(coords))
    return knn_query(coords, coords, k, source_scale=scale, query_scale=scale)


def _check_scale(scale: int):
    if not 0 <= scale < NUM_SCALES:
        raise ValueError(f"scale {scale} outside 0..{NUM_SCALES - 1}")


@dataclass(frozen=True)
class IndexCache:
    scale_coords: tuple[np.ndarray, ...]
    knn: tuple[NeighborTable, ...]
    down_maps: tuple[ResampleMap, ...]
    stats: dict = field(default_factory=dict, compare=False)

    def num_points(self, scale: int) -> int:
        return len(self.scale_coords[scale])


def build_cache(cloud: PointCloud, config: ModelConfig) -> IndexCache:
    """Coordinates, neighbor tables and adjacent down maps for scales 0..4."""
    start = time.perf_counter()
    coords = [np.asarray(cloud.coords, dtype=np.float64)]
    maps = []
    for s in range(NUM_SCALES - 1):
        rmap = down_map(coords[s], config, s)
        if rmap.num_coarse < 1:
            raise DegenerateInputError(f"scale {s + 1} has no points")
        maps.append(rmap)
        coords.append(rmap.coarse_coords)
    tables = tuple(neighbor_table(coords[s], config, s) for s in range(NUM_SCALES))
    for arr in coords:
        arr.setflags(write=False)
    stats = {
        "build_seconds": time.perf_counter() - start,
        "points": [len(c) for c in coords],
        "knn_entries": [t.indices.size for t in tables],
    }
    return IndexCache(tuple(coords), tables, tuple(maps), stats)


def lookup_knn(cache: IndexCache, scale: int) -> NeighborTable:
    _check_scale(scale)
    return cache.knn[scale]


def lookup_down(cache: IndexCache, from_scale: int, to_scale: int) -> list[ResampleMap]:
    """Adjacent maps to pool through, in application order."""
    _check_scale(from_scale)
    _check_scale(to_scale)
    if to_scale <= from_scale:
        raise ValueError(f"downsampling needs from < to, got {from_scale} -> {to_scale}")
    return [cache.down_maps[s] for s in range(from_scale, to_scale)]


def lookup_up(cache: IndexCache, from_scale: int, to_scale: int) -> list[ResampleMap]:
    """Adjacent maps to unpool through, coarsest first."""
    _check_scale(from_scale)
    _check_scale(to_scale)
    if to_scale >= from_scale:
        raise ValueError(f"upsampling needs from > to, got {from_scale} -> {to_scale}")
    return [cache.down_maps[s] for s in range(from_scale - 1, to_scale - 1, -1)]


class CachedIndex:
    """Index provider backed by a prebuilt cache; never constructs anything."""

    def __init__(self, cache: IndexCache):
        self.cache = cache
        self.constructions = 0
        self.lookups = 0
        self.index_seconds = 0.0

    def coords(self, scale: int) -> np.ndarray:
        return self.cache.scale_coords[scale]

    def knn(self, scale: int) -> NeighborTable:
        self.lookups += 1
        return lookup_knn(self.cache, scale)

    def down_chain(self, from_scale: int, to_scale: int) -> list[ResampleMap]:
        self.lookups += 1
        return lookup_down(self.cache, from_scale, to_scale)

    def up_chain(self, from_scale: int, to_scale: int) -> list[ResampleMap]:
        self.lookups += 1
        return lookup_up(self.cache, from_scale, to_scale)


class OnTheFlyIndex:
    """Index provider that recomputes every table and map when asked.

    Coordinates of coarser scales are kept once derived (they travel with
    the features), but neighbor tables and resampling maps are rebuilt for
    every request.
    """

    def __init__(self, cloud: PointCloud, config: ModelConfig):
        self.config = config
        self._coords = [np.asarray(cloud.coords, dtype=np.float64)]
        self.constructions = 0
        self.index_seconds = 0.0

    def _map(self, scale: int) -> ResampleMap:
        start = time.perf_counter()
        rmap = down_map(self.coords(scale), self.config, scale)
        self.constructions += 1
        self.index_seconds += time.perf_counter() - start
        return rmap

    def coords(self, scale: int) -> np.ndarray:
        _check_scale(scale)
        while len(self._coords) <= scale:
            self._coords.append(self._map(len(self._coords) - 1).coarse_coords)
        return self._coords[scale]

    def knn(self, scale: int) -> NeighborTable:
        coords = self.coords(scale)
        start = time.perf_counter()
        table = neighbor_table(coords, self.config, scale)
        self.constructions += 1
        self.index_seconds += time.perf_counter() - start
        return table

    def down_chain(self, from_scale: int, to_scale: int) -> list[ResampleMap]:
        if to_scale <= from_scale:
            raise ValueError(f"downsampling needs from < to, got {from_scale} -> {to_scale}")
        return [self._map(s) for s in range(from_scale, to_scale)]

    def up_chain(self, from_scale: int, to_scale: int) -> list[ResampleMap]:
        if to_scale >= from_scale:
            raise ValueError(f"upsampling needs from > to, got {from_scale} -> {to_scale}")
        return [self._map(s) for s in range(from_scale - 1, to_scale - 1, -1)]


@dataclass
class BenchReport:
    mode: str
    samples_ms: list[float]
    index_ms: float
    kernel_ms: float
    logits: np.ndarray = field(repr=False)
    points: list[int] = field(default_factory=list)

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))

    def key_values(self) -> str:
        return (f"mode={self.mode}\nmedian_ms={self.median_ms:.3f}\n"
                f"index_ms={self.index_ms:.3f}\nkernel_ms={self.kernel_ms:.3f}")


def _timed_pass(cloud: PointCloud, config: ModelConfig, weights, mode: str):
    """One forward pass; returns (total s, index s, logits, points per scale)."""
    from .model import model_forward

    start = time.perf_counter()
    if mode == "cached":
        cache = build_cache(cloud, config)
        provider = CachedIndex(cache)
        index_s = time.perf_counter() - start
    else:
        provider = OnTheFlyIndex(cloud, config)
    out = model_forward(cloud, provider, weights, config)
    total = time.perf_counter() - start
    if mode == "cached":
        points = cache.stats["points"]
    else:
        index_s = provider.index_seconds
        points = [len(provider.coords(s)) for s in range(NUM_SCALES)]
    return total, index_s, out.logits.data, points


def _report(mode, runs) -> BenchReport:
    warm, timed = runs[0], runs[1:]
    samples = [t * 1e3 for t, _, _, _ in timed]
    index_ms = float(np.median([i * 1e3 for _, i, _, _ in timed]))
    median = float(np.median(samples))
    return BenchReport(mode, samples, index_ms, median - index_ms, warm[2], warm[3])


def _check_bench_args(repeats, modes):
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    for mode in modes:
        if mode not in ("cached", "on_the_fly"):
            raise ValueError(f"unknown mode {mode!r}")


def bench_index(cloud: PointCloud, config: ModelConfig, repeats: int, mode: str,
                weights=None, seed: int = 0) -> BenchReport:
    """Median wall-clock of a forward pass, one warm-up excluded.

    In cached mode every sample includes building the cache for the cloud,
    so the comparison charges the precompute to each pass.
    """
    from .weights import init_weights

    _check_bench_args(repeats, [mode])
    if weights is None:
        weights = init_weights(config, seed)
    return _report(mode, [_timed_pass(cloud, config, weights, mode) for _ in range(repeats + 1)])


def bench_compare(cloud: PointCloud, config: ModelConfig, repeats: int, weights=None,
                  seed: int = 0) -> tuple[BenchReport, BenchReport]:
    """Cached and on-the-fly reports from interleaved passes.

    Rounds alternate the order (cached first, then on-the-fly first, ...) so
    slow drift in machine speed lands on both modes alike.
    """
    from .weights import init_weights

    _check_bench_args(repeats, [])
    if weights is None:
        weights = init_weights(config, seed)
    modes = ("cached", "on_the_fly")
    runs = {m: [] for m in modes}
    for rnd in range(repeats + 1):
        for mode in (modes if rnd % 2 == 0 else modes[::-1]):
            runs[mode].append(_timed_pass(cloud, config, weights, mode))
    return _report("cached", runs["cached"]), _report("on_the_fly", runs["on_the_fly"])
