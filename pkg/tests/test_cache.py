import numpy as np
import pytest

from pointhr.cache import (CachedIndex, OnTheFlyIndex, bench_compare, bench_index, build_cache,
                           lookup_down, lookup_knn, lookup_up)
from pointhr.config import PRESETS
from pointhr.core import PointCloud
from pointhr.model import model_forward
from pointhr.spatial import grid_pool_map
from pointhr.synthetic import random_cloud, synthetic_room
from pointhr.weights import init_weights

T = PRESETS["T"]


@pytest.fixture(scope="module")
def room():
    return synthetic_room(3000, 1)


def test_single_cell_collapse():
    cloud = PointCloud([[0.01, 0.01, 0.01], [0.02, 0.05, 0.03], [0.09, 0.0, 0.04]])
    cache = build_cache(cloud, T)
    assert cache.stats["points"] == [3, 1, 1, 1, 1]
    assert lookup_knn(cache, 0).indices.shape == (3, 3)
    assert lookup_knn(cache, 4).indices.tolist() == [[0]]


def test_scales_follow_grid_pooling(room):
    cache = build_cache(room, T)
    for s in range(4):
        expected = grid_pool_map(cache.scale_coords[s], T.grid_sizes[s]).coarse_coords
        assert np.array_equal(cache.scale_coords[s + 1], expected)
    assert cache.knn[2].k == 16 and cache.knn[0].k == T.knn_k(1)


def test_build_is_pure(room):
    a, b = build_cache(room, T), build_cache(room, T)
    assert all(np.array_equal(x, y) for x, y in zip(a.scale_coords, b.scale_coords))
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a.knn, b.knn))
    assert all(np.array_equal(x.down_assign, y.down_assign) for x, y in zip(a.down_maps, b.down_maps))
    with pytest.raises(ValueError):
        a.scale_coords[1][0, 0] = 5.0


def test_chain_lookups(room):
    cache = build_cache(room, T)
    assert lookup_down(cache, 1, 2) == [cache.down_maps[1]]
    assert lookup_down(cache, 1, 3) == [cache.down_maps[1], cache.down_maps[2]]
    assert lookup_up(cache, 3, 1) == [cache.down_maps[2], cache.down_maps[1]]
    for bad in [(1, 1), (3, 1)]:
        with pytest.raises(ValueError):
            lookup_down(cache, *bad)
    with pytest.raises(ValueError):
        lookup_up(cache, 1, 3)
    with pytest.raises(ValueError):
        lookup_knn(cache, 5)
    with pytest.raises(ValueError):
        lookup_down(cache, -1, 2)


class Recorder:
    """Wraps a provider and remembers what each request returned."""

    def __init__(self, inner):
        self.inner = inner
        self.knn_calls, self.chains = [], []

    def coords(self, s):
        return self.inner.coords(s)

    def knn(self, s):
        t = self.inner.knn(s)
        self.knn_calls.append((s, t))
        return t

    def down_chain(self, a, b):
        c = self.inner.down_chain(a, b)
        self.chains.append((a, b, c))
        return c

    def up_chain(self, a, b):
        c = self.inner.up_chain(a, b)
        self.chains.append((a, b, c))
        return c


def test_cached_tables_equal_on_the_fly_at_point_of_use():
    cloud = random_cloud(4096, 2, extent=(3, 3, 1))
    weights = init_weights(T, 0)
    cached = Recorder(CachedIndex(build_cache(cloud, T)))
    fly = Recorder(OnTheFlyIndex(cloud, T))
    a = model_forward(cloud, cached, weights, T)
    b = model_forward(cloud, fly, weights, T)
    assert np.array_equal(a.logits.data, b.logits.data)
    assert [s for s, _ in cached.knn_calls] == [s for s, _ in fly.knn_calls]
    for (_, x), (_, y) in zip(cached.knn_calls, fly.knn_calls):
        assert np.array_equal(x.indices, y.indices)
    for (_, _, xs), (_, _, ys) in zip(cached.chains, fly.chains):
        assert all(np.array_equal(x.down_assign, y.down_assign) for x, y in zip(xs, ys))
    assert cached.inner.constructions == 0 and fly.inner.constructions > 0
    # every branch reuses one table object across all stages
    for s in range(5):
        tables = {id(t) for scale, t in cached.knn_calls if scale == s}
        assert len(tables) <= 1


def test_bench_report_shape():
    cloud = random_cloud(400, 0)
    report = bench_index(cloud, T, 5, "cached")
    assert len(report.samples_ms) == 5
    assert report.median_ms == float(np.median(report.samples_ms))
    assert "median_ms=" in report.key_values() and "index_ms=" in report.key_values()
    other = bench_index(cloud, T, 3, "on_the_fly", weights=init_weights(T, 0))
    assert np.array_equal(report.logits, other.logits)
    assert other.index_ms > 0
    with pytest.raises(ValueError):
        bench_index(cloud, T, 2, "cached")


def test_bench_compare_interleaves():
    cloud = random_cloud(300, 1)
    cached, fly = bench_compare(cloud, T, 3)
    assert (cached.mode, fly.mode) == ("cached", "on_the_fly")
    assert len(cached.samples_ms) == len(fly.samples_ms) == 3
    assert np.array_equal(cached.logits, fly.logits)
    assert cached.points == fly.points
