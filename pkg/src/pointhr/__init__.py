"""High-resolution point-cloud networks with exact spatial operators and a shared index cache."""

import warnings

# numba probes an old system TBB on import of its parallel backend and falls back to OpenMP
warnings.filterwarnings("ignore", message="The TBB threading layer")

from .cache import IndexCache, bench_compare, bench_index, build_cache  # noqa: E402
from .config import PRESETS, ConfigError, ModelConfig, load_config, parse_config  # noqa: E402
from .core import DegenerateInputError, FeatureMatrix, LabelOutput, PointCloud  # noqa: E402
from .io import CloudParseError, read_cloud, write_labels, write_logits  # noqa: E402
from .model import (build_model, classification_forward, count_params, estimate_flops,  # noqa: E402
                    infer, model_forward)
from .spatial import fps_select, grid_pool_map, knn_query, pool_features, unpool_features  # noqa: E402
from .weights import WeightStore, init_weights, load_weights, save_weights  # noqa: E402

__all__ = [
    "IndexCache", "bench_compare", "bench_index", "build_cache",
    "PRESETS", "ConfigError", "ModelConfig", "load_config", "parse_config",
    "DegenerateInputError", "FeatureMatrix", "LabelOutput", "PointCloud",
    "CloudParseError", "read_cloud", "write_labels", "write_logits",
    "build_model", "classification_forward", "count_params", "estimate_flops", "infer",
    "model_forward",
    "fps_select", "grid_pool_map", "knn_query", "pool_features", "unpool_features",
    "WeightStore", "init_weights", "load_weights", "save_weights",
]
