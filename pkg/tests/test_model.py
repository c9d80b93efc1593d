import numpy as np
import pytest

from pointhr.cache import CachedIndex, build_cache
from pointhr.config import PRESETS, PRESET_PARAMS, ModelConfig
from pointhr.core import FeatureMatrix, PointCloud
from pointhr.model import (BranchState, build_model, classification_forward, count_params,
                           decoder_forward, encoder_forward, estimate_flops, fuse_branches,
                           infer, model_forward, param_report, stem_forward)
from pointhr.synthetic import random_cloud, synthetic_room
from pointhr.weights import init_weights

T = PRESETS["T"]
# small widths keep forward passes in the millisecond range
TINY = ModelConfig(modules=(1, 1, 1, 1), blocks=(1, 1, 1, 1), channels=(8, 8, 8, 8),
                   stem_channels=8, neighbors=(4, 4, 4, 4), groups=(2, 2, 4, 8), num_classes=5,
                   grid_sizes=(0.15, 0.3, 0.6, 1.2))


def _zero(weights, select):
    return weights.map(lambda name, v: np.zeros_like(v), select)


def test_block_counts_per_branch():
    g = build_model(T)
    per_stage = [T.modules[i] * T.blocks[i] for i in range(4)]
    assert per_stage == [2, 2, 4, 2]
    for i in range(1, 5):
        for j in range(1, i + 1):
            assert sum(len(g.blocks[(i, m, j)]) for m in range(1, T.modules[i - 1] + 1)) == per_stage[i - 1]
    assert g.transitions == ["stage2.transition", "stage3.transition", "stage4.transition"]


def test_layer_names_deterministic():
    assert build_model(PRESETS["L"]).names() == build_model(PRESETS["L"]).names()
    names = build_model(TINY).names()
    assert len(names) == len(set(names))


def test_fusions_connect_all_pairs():
    g = build_model(T)
    for (i, m), layers in g.fusions.items():
        pairs = {(int(n.split(".")[3][2:]), int(n.split(".")[4][4:])) for n in layers}
        assert pairs == {(t, s) for t in range(1, i + 1) for s in range(1, i + 1) if t != s}
    # one step per scale difference: stage 4, 1 -> 4 uses three linears
    assert sum(".to4.from1." in n for n in g.fusions[(4, 1)]) == 3


@pytest.mark.parametrize("name", ["T", "S", "B", "L"])
def test_preset_param_counts(name):
    n = count_params(PRESETS[name])
    assert abs(n / PRESET_PARAMS[name] - 1) <= 0.30
    assert sum(param_report(PRESETS[name]).values()) == n
    assert sum(build_model(PRESETS[name]).layers().values()) == n


def test_flops_grow_with_points_and_size():
    assert estimate_flops(T, 100_000) > estimate_flops(T, 10_000) > 0
    assert estimate_flops(PRESETS["L"], 100_000) > estimate_flops(T, 100_000)


@pytest.fixture(scope="module")
def cloud():
    return random_cloud(600, 3, extent=(2.0, 2.0, 1.0))


@pytest.fixture(scope="module")
def weights():
    return init_weights(TINY, 5)


def test_logits_shape_and_labels(cloud, weights):
    out = model_forward(cloud, build_cache(cloud, TINY), weights, TINY)
    assert out.logits.shape == (600, 5) and out.logits.scale_id == 0
    assert np.isfinite(out.logits.data).all()
    assert np.array_equal(out.labels, out.logits.data.argmax(axis=1))


def test_stem_collapse_and_zero_weights():
    cloud = PointCloud([[0.01, 0.02, 0.0], [0.05, 0.05, 0.05], [0.1, 0.1, 0.1]])
    w = init_weights(TINY, 0)
    f0, state = stem_forward(cloud, build_cache(cloud, TINY), w, TINY)
    assert state.features.shape == (1, 8) and f0.shape == (3, 8)
    _, zero_state = stem_forward(cloud, None, _zero(w, lambda n: True), TINY)
    assert not zero_state.features.data.any()


def test_stem_rejects_raw_channel_mismatch(cloud, weights):
    colored = PointCloud(cloud.coords, np.ones((600, 2)))
    with pytest.raises(ValueError, match="raw channels"):
        stem_forward(colored, None, weights, TINY)


def test_raw_features_are_used():
    cfg = TINY.replace(raw_channels=3)
    cloud = synthetic_room(500, 0, with_color=True)
    w = init_weights(cfg, 0)
    a = model_forward(cloud, None, w, cfg).logits.data
    b = model_forward(PointCloud(cloud.coords, cloud.raw_features * 0.5), None, w, cfg).logits.data
    assert not np.array_equal(a, b)


def _states(cache, cfg, widths, fill):
    return [BranchState(FeatureMatrix(np.full((cache.num_points(j), w), fill), j), j)
            for j, w in enumerate(widths, 1)]


def test_fusion_of_constants():
    cfg = TINY
    cloud = random_cloud(800, 1, extent=(2, 2, 2))
    cache = build_cache(cloud, cfg)
    widths = [cfg.width(3, j) for j in (1, 2, 3)]
    # channel matchers that keep a constant vector constant
    w = init_weights(cfg, 0).map(lambda name, v: np.full_like(v, 1.0 / v.shape[0]) if name.endswith(".w")
                                 else np.zeros_like(v), lambda n: ".fuse." in n)
    states = _states(cache, cfg, widths, 0.7)
    out = fuse_branches(states, 2, 3, 1, CachedIndex(cache), w)
    assert out.shape == (cache.num_points(2), widths[1])
    np.testing.assert_allclose(out.data, 2.1, rtol=0, atol=1e-15)
    single = fuse_branches(states[:1], 1, 1, 1, CachedIndex(cache), w)
    assert np.array_equal(single.data, states[0].features.data)


def test_fusion_with_zero_cross_weights_is_identity(cloud, weights):
    w = _zero(weights, lambda n: ".fuse." in n)
    cache = build_cache(cloud, TINY)
    rng = np.random.default_rng(0)
    states = [BranchState(FeatureMatrix(rng.normal(size=(cache.num_points(j), TINY.width(4, j))), j), j)
              for j in range(1, 5)]
    for j in range(1, 5):
        assert np.array_equal(fuse_branches(states, j, 4, 1, CachedIndex(cache), w).data,
                              states[j - 1].features.data)


@pytest.mark.parametrize("variant", ["sum", "pg", "pgr"])
def test_decoder_of_zero_features_is_zero(cloud, variant):
    cfg = TINY.replace(decoder=variant)
    cache = build_cache(cloud, cfg)
    states = [BranchState(FeatureMatrix(np.zeros((cache.num_points(j), cfg.width(4, j))), j), j)
              for j in range(1, 5)]
    out = decoder_forward(states, FeatureMatrix(np.zeros((600, 8)), 0), variant, CachedIndex(cache),
                          init_weights(cfg, 1), cfg)
    assert out.shape == (600, 8) and not out.data.any()


def test_decoder_variants_differ_and_pgr_reduces_to_pg(cloud):
    cfg = TINY
    cache = build_cache(cloud, cfg)
    f0, states = encoder_forward(cloud, cache, init_weights(cfg, 2), cfg)
    outs = {}
    for variant in ("sum", "pg", "pgr"):
        w = init_weights(cfg.replace(decoder=variant), 2)
        outs[variant] = decoder_forward(states, f0, variant, CachedIndex(cache), w, cfg).data
    assert not np.array_equal(outs["sum"], outs["pg"])
    assert not np.array_equal(outs["pg"], outs["pgr"])
    w = _zero(init_weights(cfg, 2), lambda n: n.startswith("decoder.refine") and ".update." in n)
    pgr = decoder_forward(states, f0, "pgr", CachedIndex(cache), w, cfg).data
    assert np.array_equal(pgr, outs["pg"])
    with pytest.raises(ValueError):
        decoder_forward(states, f0, "fpn", CachedIndex(cache), w, cfg)


@pytest.mark.parametrize("operator", ["va", "gva", "mlp"])
def test_cached_equals_on_the_fly(cloud, operator):
    cfg = TINY.replace(operator=operator, pos_encoding=operator == "va")
    w = init_weights(cfg, 4)
    assert np.array_equal(infer(cloud, w, cfg, True).logits.data, infer(cloud, w, cfg, False).logits.data)


def test_permutation_equivariance(cloud, weights):
    perm = np.random.default_rng(1).permutation(600)
    base = model_forward(cloud, None, weights, TINY)
    moved = model_forward(cloud.permuted(perm), None, weights, TINY)
    assert np.array_equal(moved.labels, base.labels[perm])
    assert np.array_equal(moved.logits.data, base.logits.data[perm])


def test_duplicated_points_keep_their_logits():
    # with one neighbor per point the coincident copy never changes a scale-0 aggregation
    cfg = TINY.replace(neighbors=(1, 4, 4, 4))
    cloud = random_cloud(300, 8)
    doubled = PointCloud(np.vstack([cloud.coords, cloud.coords]))
    w = init_weights(cfg, 0)
    a = model_forward(cloud, None, w, cfg).logits.data
    b = model_forward(doubled, None, w, cfg).logits.data
    assert np.abs(b[:300] - a).max() < 1e-9 and np.abs(b[300:] - a).max() < 1e-9


def test_classification_shape_and_invariance():
    cfg = TINY.replace(task="cls", num_classes=7)
    cloud = random_cloud(500, 2)
    w = init_weights(cfg, 0)
    out = classification_forward(cloud, None, w, cfg)
    assert out.shape == (7,)
    perm = np.random.default_rng(3).permutation(500)
    assert np.abs(classification_forward(cloud.permuted(perm), None, w, cfg) - out).max() <= 1e-9
