"""The multi-branch high-resolution network.

Layout (branch ``j`` of stage ``i`` lives at scale ``j`` with width
``2**(j-1) * C_i``)::

    stem:    raw -> C_0 embed, one block at scale 0, pool to scale 1, C_0 -> C_1
    stage i: i branches; M_i modules of (B_i blocks per branch, then fusion)
             entering stage i adds branch i by pooling branch i-1
    decoder: sum | pg | pgr back to scale 0, joined with the stem feature
    head:    two linear layers -> num_classes
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cache import CachedIndex, IndexCache, OnTheFlyIndex, build_cache
from .config import ModelConfig
from .core import FeatureMatrix, LabelOutput, PointCloud
from .seqops.block import block_param_shapes, sequence_block_forward
from .seqops.kernels import linear, relu
from .spatial import pool_features, unpool_features

# mean point spacing of the reference cloud used by the FLOPs estimate
REFERENCE_SPACING = 0.04


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class BranchState:
    features: FeatureMatrix
    branch_id: int


@dataclass
class ModelGraph:
    config: ModelConfig
    params: list[ParamSpec] = field(default_factory=list)
    # (stage, module, branch) -> block prefixes, in execution order
    blocks: dict[tuple[int, int, int], list[str]] = field(default_factory=dict)
    # layer prefixes of the transitions that open branch 2, 3 and 4, in order
    transitions: list[str] = field(default_factory=list)
    fusions: dict[tuple[int, int], list[str]] = field(default_factory=dict)

    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def layers(self) -> dict[str, int]:
        """Parameter count per layer (tensor name minus its last component)."""
        out: dict[str, int] = {}
        for p in self.params:
            layer = p.name.rsplit(".", 1)[0]
            out[layer] = out.get(layer, 0) + p.size
        return out

    def _linear(self, name, cin, cout, bias=True):
        self.params.append(ParamSpec(f"{name}.w", (cin, cout), "weight"))
        if bias:
            self.params.append(ParamSpec(f"{name}.b", (cout,), "zeros"))

    def _block(self, prefix, width, scale):
        cfg = self.config
        for local, shape, init in block_param_shapes(width, cfg.operator, cfg.block_groups(scale),
                                                     cfg.pos_encoding):
            self.params.append(ParamSpec(f"{prefix}.{local}", shape, init))


def fuse_prefix(stage, module, target, source, step):
    direction = "down" if source < target else "up"
    return f"stage{stage}.module{module}.fuse.to{target}.from{source}.{direction}{step}"


def build_model(config: ModelConfig) -> ModelGraph:
    """Enumerate every layer of the architecture, in a fixed order."""
    g = ModelGraph(config)
    c = config
    g._linear("stem.embed", 3 + c.raw_channels, c.stem_channels)
    g._block("stem.block", c.stem_channels, 0)
    g._linear("stem.down", c.stem_channels, c.width(1, 1))
    for i in range(1, 5):
        if i > 1:
            for j in range(1, i):
                if c.width(i - 1, j) != c.width(i, j):
                    g._linear(f"stage{i}.adapt{j}", c.width(i - 1, j), c.width(i, j))
            g._linear(f"stage{i}.transition", c.width(i - 1, i - 1), c.width(i, i))
            g.transitions.append(f"stage{i}.transition")
        for m in range(1, c.modules[i - 1] + 1):
            for j in range(1, i + 1):
                prefixes = []
                for b in range(1, c.blocks[i - 1] + 1):
                    prefix = f"stage{i}.module{m}.branch{j}.block{b}"
                    g._block(prefix, c.width(i, j), j)
                    prefixes.append(prefix)
                g.blocks[(i, m, j)] = prefixes
            fused = []
            for target in range(1, i + 1):
                for source in range(1, i + 1):
                    if source < target:
                        for t in range(source, target):
                            name = fuse_prefix(i, m, target, source, t + 1)
                            g._linear(name, c.width(i, t), c.width(i, t + 1))
                            fused.append(name)
                    elif source > target:
                        for t in range(source, target, -1):
                            name = fuse_prefix(i, m, target, source, t - 1)
                            g._linear(name, c.width(i, t), c.width(i, t - 1))
                            fused.append(name)
            g.fusions[(i, m)] = fused
    if c.task == "cls":
        for j in range(2, 5):
            g._linear(f"cls_decoder.down{j}", c.width(4, j - 1), c.width(4, j))
        g._linear("cls_head.fc1", c.width(4, 4), c.width(4, 4))
        g._linear("cls_head.fc2", c.width(4, 4), c.num_classes)
        return g
    if c.decoder == "sum":
        for j in range(2, 5):
            g._linear(f"decoder.sum.from{j}", c.width(4, j), c.width(4, 1))
    else:
        for j in range(3, 0, -1):
            g._linear(f"decoder.up{j}", c.width(4, j + 1), c.width(4, j))
            if c.decoder == "pgr":
                g._block(f"decoder.refine{j}", c.width(4, j), j)
    g._linear("decoder.up0", c.width(4, 1), c.stem_channels)
    if c.decoder == "pgr":
        g._block("decoder.refine0", c.stem_channels, 0)
    g._linear("head.fc1", c.stem_channels, c.stem_channels)
    g._linear("head.fc2", c.stem_channels, c.num_classes)
    return g


# ---------------------------------------------------------------------------
# forward


def as_provider(index, cloud: PointCloud, config: ModelConfig):
    """Accept a built cache, a provider, or ``None`` (recompute on the fly)."""
    if index is None:
        return OnTheFlyIndex(cloud, config)
    if isinstance(index, IndexCache):
        return CachedIndex(index)
    return index


def _lin(x, weights, name):
    return linear(x, weights[f"{name}.w"], weights[f"{name}.b"])


def _run_blocks(x, scale, prefixes, index, weights, config):
    coords = index.coords(scale)
    for prefix in prefixes:
        # every block asks for its own table; only the cache makes that a lookup
        x = sequence_block_forward(x, coords, index.knn(scale), weights.subset(prefix),
                                   config.operator, config.block_groups(scale))
    return x


def _pool(x, maps):
    for rmap in maps:
        x = pool_features(x, rmap, "max")
    return x


def _unpool(x, maps):
    for rmap in maps:
        x = unpool_features(x, rmap)
    return x


def stem_forward(cloud: PointCloud, index, weights, config: ModelConfig):
    """Returns (scale-0 feature, branch-1 state at scale 1)."""
    index = as_provider(index, cloud, config)
    w = weights["stem.embed.w"]
    if w.shape[0] != 3 + cloud.num_raw_channels:
        raise ValueError(f"cloud has {cloud.num_raw_channels} raw channels but the weights expect "
                         f"{w.shape[0] - 3}")
    f0 = _lin(cloud.input_features(), weights, "stem.embed")
    f0 = _run_blocks(f0, 0, ["stem.block"], index, weights, config)
    f1 = _lin(_pool(f0, index.down_chain(0, 1)), weights, "stem.down")
    return FeatureMatrix(f0, 0), BranchState(FeatureMatrix(f1, 1), 1)


def fuse_branches(states: list[BranchState], target_branch: int, stage: int, module: int,
                  index, weights) -> FeatureMatrix:
    """Own features plus every other branch resampled to ``target_branch``.

    Higher-resolution sources go through one pool + linear per scale step;
    lower-resolution sources through one linear + unpool per step (for grid
    maps unpooling is a row copy, so the linear may run at the coarse side).
    """
    j = target_branch
    out = states[j - 1].features.data
    for a in range(1, len(states) + 1):
        if a == j:
            continue
        x = states[a - 1].features.data
        if a < j:
            for t, rmap in zip(range(a, j), index.down_chain(a, j)):
                x = _lin(pool_features(x, rmap, "max"), weights, fuse_prefix(stage, module, j, a, t + 1))
        else:
            for t, rmap in zip(range(a, j, -1), index.up_chain(a, j)):
                x = unpool_features(_lin(x, weights, fuse_prefix(stage, module, j, a, t - 1)), rmap)
        out = out + x
    return FeatureMatrix(out, j)


def encoder_forward(cloud: PointCloud, index, weights, config: ModelConfig):
    """Stem and four stages; returns (scale-0 feature, final branch states)."""
    index = as_provider(index, cloud, config)
    graph = build_model(config)
    f0, first = stem_forward(cloud, index, weights, config)
    states = [first]
    for i in range(1, 5):
        if i > 1:
            new = _pool(states[-1].features.data, index.down_chain(i - 1, i))
            new = _lin(new, weights, f"stage{i}.transition")
            adapted = []
            for j, st in enumerate(states, 1):
                x = st.features.data
                if config.width(i - 1, j) != config.width(i, j):
                    x = _lin(x, weights, f"stage{i}.adapt{j}")
                adapted.append(BranchState(FeatureMatrix(x, j), j))
            states = adapted + [BranchState(FeatureMatrix(new, i), i)]
        for m in range(1, config.modules[i - 1] + 1):
            states = [BranchState(FeatureMatrix(
                _run_blocks(st.features.data, j, graph.blocks[(i, m, j)], index, weights, config),
                j), j) for j, st in enumerate(states, 1)]
            if i > 1:
                states = [BranchState(fuse_branches(states, j, i, m, index, weights), j)
                          for j in range(1, i + 1)]
    return f0, states


def decoder_forward(final_states: list[BranchState], stem_feature: FeatureMatrix, variant: str,
                    index, weights, config: ModelConfig) -> FeatureMatrix:
    """Merge the four branches back to scale 0."""
    if variant not in ("sum", "pg", "pgr"):
        raise ValueError(f"unknown decoder variant {variant!r}")
    if len(final_states) != 4:
        raise ValueError("decoder needs all four branch states")
    feats = [st.features.data for st in final_states]
    if variant == "sum":
        x = feats[0]
        for j in range(2, 5):
            x = x + _unpool(_lin(feats[j - 1], weights, f"decoder.sum.from{j}"), index.up_chain(j, 1))
    else:
        x = feats[3]
        for j in range(3, 0, -1):
            x = _unpool(_lin(x, weights, f"decoder.up{j}"), index.up_chain(j + 1, j)) + feats[j - 1]
            if variant == "pgr":
                x = _run_blocks(x, j, [f"decoder.refine{j}"], index, weights, config)
    x = _unpool(_lin(x, weights, "decoder.up0"), index.up_chain(1, 0)) + stem_feature.data
    if variant == "pgr":
        x = _run_blocks(x, 0, ["decoder.refine0"], index, weights, config)
    return FeatureMatrix(x, 0)


def head_forward(x, weights, prefix="head"):
    return _lin(relu(_lin(x, weights, f"{prefix}.fc1")), weights, f"{prefix}.fc2")


def model_forward(cloud: PointCloud, index, weights, config: ModelConfig,
                  decoder: str | None = None) -> LabelOutput:
    """Per-point logits and labels at the input resolution, in input order.

    ``index`` is an :class:`IndexCache`, an index provider, or ``None`` for
    on-the-fly index computation.
    """
    index = as_provider(index, cloud, config)
    f0, states = encoder_forward(cloud, index, weights, config)
    x = decoder_forward(states, f0, decoder or config.decoder, index, weights, config)
    logits = head_forward(x.data, weights)
    assert np.isfinite(logits).all(), "non-finite logits"
    return LabelOutput.from_logits(logits)


def classification_forward(cloud: PointCloud, index, weights, config: ModelConfig) -> np.ndarray:
    """Global class logits: fold branches high-to-low, global max, linear head."""
    index = as_provider(index, cloud, config)
    _, states = encoder_forward(cloud, index, weights, config)
    x = states[0].features.data
    for j in range(2, 5):
        x = _lin(_pool(x, index.down_chain(j - 1, j)), weights, f"cls_decoder.down{j}")
        x = x + states[j - 1].features.data
    return head_forward(x.max(axis=0, keepdims=True), weights, "cls_head")[0]


def infer(cloud: PointCloud, weights, config: ModelConfig, use_cache: bool = True) -> LabelOutput:
    index = build_cache(cloud, config) if use_cache else None
    return model_forward(cloud, index, weights, config)


# ---------------------------------------------------------------------------
# cost estimates


def count_params(config: ModelConfig) -> int:
    return build_model(config).num_params()


def param_report(config: ModelConfig) -> dict[str, int]:
    """Parameter count per top-level part (stem, stage1..4, decoder, head)."""
    out: dict[str, int] = {}
    for p in build_model(config).params:
        part = p.name.split(".", 1)[0]
        out[part] = out.get(part, 0) + p.size
    return out


def reference_points(config: ModelConfig, n_points: int) -> list[int]:
    """Expected point count per scale for a planar cloud with uniform spacing.

    Points are spread over a square at :data:`REFERENCE_SPACING` meters mean
    spacing; a scale keeps the expected number of non-empty cells.
    """
    counts = [int(n_points)]
    side = REFERENCE_SPACING * math.sqrt(n_points)
    for s in range(4):
        if config.sampler == "fps":
            nxt = math.ceil(counts[-1] / config.fps_ratio)
        else:
            cells = (side / config.grid_sizes[s]) ** 2
            nxt = cells * (1.0 - math.exp(-n_points / cells)) if cells > 0 else 1
        counts.append(max(1, min(counts[-1], int(round(nxt)))))
    return counts


def _block_macs(rows, width, k, config: ModelConfig, scale):
    c = width
    k = min(k, rows)
    macs = 3 * rows * c * c  # embed, update, and the two norms/residual rounded into one
    if config.operator == "mlp":
        macs += rows * k * (2 * c * c + c)
    else:
        out = c if config.operator == "va" else config.block_groups(scale)
        macs += 3 * rows * c * c  # q, k, v
        macs += rows * k * (c * c + c * out)  # weight MLP on every relation
        macs += 2 * rows * k * c  # gathers and the weighted sum
    if config.pos_encoding:
        macs += rows * k * (3 * c + c * c)
    return macs


def estimate_flops(config: ModelConfig, n_points: int) -> float:
    """Multiply-accumulates of one forward pass over the reference cloud."""
    n = reference_points(config, n_points)
    c = config
    graph = build_model(config)
    macs = n[0] * (3 + c.raw_channels) * c.stem_channels
    macs += _block_macs(n[0], c.stem_channels, c.knn_k(0), c, 0)
    macs += n[1] * c.stem_channels * c.width(1, 1)
    for i in range(1, 5):
        if i > 1:
            macs += n[i] * c.width(i - 1, i - 1) * c.width(i, i)
            for j in range(1, i):
                if c.width(i - 1, j) != c.width(i, j):
                    macs += n[j] * c.width(i - 1, j) * c.width(i, j)
        for m in range(1, c.modules[i - 1] + 1):
            for j in range(1, i + 1):
                macs += len(graph.blocks[(i, m, j)]) * _block_macs(n[j], c.width(i, j), c.knn_k(j), c, j)
            for target in range(1, i + 1):
                for source in range(1, i + 1):
                    if source < target:
                        macs += sum(n[t + 1] * c.width(i, t) * c.width(i, t + 1)
                                    for t in range(source, target))
                    elif source > target:
                        macs += sum(n[t] * c.width(i, t) * c.width(i, t - 1)
                                    for t in range(source, target, -1))
    if c.task == "cls":
        macs += sum(n[j] * c.width(4, j - 1) * c.width(4, j) for j in range(2, 5))
        return float(macs + c.width(4, 4) * (c.width(4, 4) + c.num_classes))
    if c.decoder == "sum":
        macs += sum(n[j] * c.width(4, j) * c.width(4, 1) for j in range(2, 5))
    else:
        for j in range(3, 0, -1):
            macs += n[j + 1] * c.width(4, j + 1) * c.width(4, j)
            if c.decoder == "pgr":
                macs += _block_macs(n[j], c.width(4, j), c.knn_k(j), c, j)
    macs += n[1] * c.width(4, 1) * c.stem_channels
    if c.decoder == "pgr":
        macs += _block_macs(n[0], c.stem_channels, c.knn_k(0), c, 0)
    macs += n[0] * c.stem_channels * (c.stem_channels + c.num_classes)
    return float(macs)
