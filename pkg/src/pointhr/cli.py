"""``pointhr`` command line: infer, bench, gradcheck, params, oracle.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .cache import bench_compare, build_cache
from .config import PRESET_PARAMS, load_config
from .core import PointCloud
from .io import read_cloud, write_labels, write_logits
from .model import (REFERENCE_SPACING, build_model, count_params, estimate_flops, model_forward,
                    param_report, reference_points)
from .seqops.gradcheck import OPERATORS, THRESHOLD, gradcheck
from .spatial import fps_select, grid_pool_map, knn_query, squared_distances
from .synthetic import random_cloud, synthetic_room
from .weights import init_weights, load_weights


class CliError(Exception):
    """Runtime failure reported on stderr with exit code 1."""


def apply_thread_limit(env=os.environ) -> None:
    value = env.get("POINTHR_THREADS")
    if not value:
        return
    import numba

    try:
        n = int(value)
    except ValueError:
        raise CliError(f"POINTHR_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise CliError(f"POINTHR_THREADS must be a positive integer, got {value!r}")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _config(args, cloud: PointCloud | None = None):
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "operator", None):
        changes["operator"] = args.operator
    if getattr(args, "decoder", None):
        changes["decoder"] = args.decoder
    if cloud is not None:
        changes["raw_channels"] = cloud.num_raw_channels
    return cfg.replace(**changes)


def _check_weights(weights, config) -> None:
    expected = {p.name: p.shape for p in build_model(config).params}
    missing = [n for n in expected if n not in weights]
    if missing:
        raise CliError(f"weights file lacks {len(missing)} tensors for this config, "
                       f"first: {missing[0]}")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise CliError(f"tensor {name} has shape {weights[name].shape}, config expects {shape}")


# ---------------------------------------------------------------------------


def cmd_infer(args) -> int:
    cloud = read_cloud(args.input)
    config = _config(args, cloud)
    if args.weights is not None:
        weights = load_weights(args.weights)
        _check_weights(weights, config)
    else:
        weights = init_weights(config, args.seed)
    index = None if args.no_cache else build_cache(cloud, config)
    out = model_forward(cloud, index, weights, config)
    write_labels(out.labels, args.output)
    if args.logits:
        write_logits(out.logits.data, args.logits)
    print(f"wrote {len(out.labels)} labels to {args.output}")
    return 0


def cmd_bench(args) -> int:
    if args.input:
        cloud = read_cloud(args.input)
    else:
        cloud = synthetic_room(args.points, args.seed)
    config = _config(args, cloud)
    weights = init_weights(config, args.seed)
    reports = bench_compare(cloud, config, args.repeat, weights)
    print(f"points per scale: {' '.join(str(p) for p in reports[0].points)}")
    print(f"{'mode':<12}{'median_ms':>12}{'index_ms':>12}{'kernel_ms':>12}")
    for r in reports:
        print(f"{r.mode:<12}{r.median_ms:>12.1f}{r.index_ms:>12.1f}{r.kernel_ms:>12.1f}")
    cached, fly = reports
    gain = 1.0 - cached.median_ms / fly.median_ms
    equal = np.array_equal(cached.logits, fly.logits)
    print(f"cached_median_ms={cached.median_ms:.3f}")
    print(f"on_the_fly_median_ms={fly.median_ms:.3f}")
    print(f"reduction={gain:.4f}")
    print(f"logits_equal={'yes' if equal else 'no'}")
    if not equal:
        raise CliError("cached and on-the-fly logits differ")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck(args.operator, args.points, args.channels, args.neighbors, args.eps, args.seed)
    if report.failure:
        print(f"FAIL {args.operator}: {report.failure}")
        return 1
    print(f"max relative error: {report.max_rel_error:.3e} (worst tensor {report.worst_tensor})")
    for name, err in report.per_tensor.items():
        print(f"  {name:<16}{err:.3e}")
    if report.resamples:
        print(f"resampled {report.resamples} time(s) to avoid kinks")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict} (threshold {THRESHOLD:g})")
    return 0 if report.passed else 1


def cmd_params(args) -> int:
    config = _config(args)
    graph = build_model(config)
    total = graph.num_params()
    print(f"parameters: {total} ({total / 1e6:.2f}M)")
    key = str(args.config).upper()
    if key in PRESET_PARAMS:
        target = PRESET_PARAMS[key]
        print(f"reference: {target / 1e6:.1f}M, deviation {total / target - 1:+.1%}")
    print("per part:")
    for part, n in param_report(config).items():
        print(f"  {part:<12}{n:>10}")
    print("per layer:")
    for layer, n in graph.layers().items():
        print(f"  {layer:<48}{n:>10}")
    n = args.flops_points
    macs = estimate_flops(config, n)
    pts = reference_points(config, n)
    print(f"FLOPs estimate: {macs / 1e9:.2f} GMACs per forward pass")
    print(f"  assumes a planar cloud of {n} points at {REFERENCE_SPACING} m mean spacing; "
          f"points per scale {' '.join(map(str, pts))}")
    return 0


def _oracle_clouds(points: int, seed: int):
    rng = np.random.default_rng(seed)
    yield random_cloud(points, seed).coords
    # coincident points and exact lattice ties
    yield rng.integers(0, 4, size=(points, 3)).astype(np.float64) * 0.25
    yield np.c_[rng.random((points, 2)), np.zeros(points)]


def _fps_mismatches(coords, m):
    sel = fps_select(coords, m)
    bad = 0
    mind = squared_distances(coords, coords[sel[:1]])[0]
    for t in range(1, m):
        if mind[sel[t]] < mind.max():
            bad += 1
        mind = np.minimum(mind, squared_distances(coords, coords[sel[t]:sel[t] + 1])[0])
    return bad


def _grid_mismatches(coords, cell):
    rmap = grid_pool_map(coords, cell)
    keys = np.floor(coords / cell)
    groups: dict[tuple, list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        groups.setdefault(key, []).append(i)
    bad = abs(len(groups) - rmap.num_coarse)
    for members in groups.values():
        if len(set(rmap.down_assign[members].tolist())) != 1:
            bad += 1
    return bad


def cmd_oracle(args) -> int:
    total = 0
    checks = 0
    for coords in _oracle_clouds(args.points, args.seed):
        if args.op == "knn":
            for k in (1, 4, 16):
                k = min(k, len(coords))
                fast = knn_query(coords, coords, k, "grid").indices
                slow = knn_query(coords, coords, k, "brute").indices
                total += int((fast != slow).any(axis=1).sum())
                checks += len(coords)
        elif args.op == "fps":
            m = min(len(coords), 64)
            total += _fps_mismatches(coords, m)
            checks += m
        else:
            for cell in (0.05, 0.2, 0.7):
                total += _grid_mismatches(coords, cell)
                checks += 1
    print(f"op: {args.op}, checks: {checks}")
    print(f"mismatches: {total}")
    return 0 if total == 0 else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointhr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="label every point of a cloud")
    p.add_argument("--config", default="L", help="preset T|S|B|L or config file")
    p.add_argument("--input", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", help="PHRW weights file")
    src.add_argument("--seed", type=int, help="initialize weights from this seed")
    p.add_argument("--output", required=True)
    p.add_argument("--logits")
    p.add_argument("--operator", choices=("va", "gva", "mlp"))
    p.add_argument("--decoder", choices=("sum", "pg", "pgr"))
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="cached vs on-the-fly index timing")
    p.add_argument("--config", default="L")
    p.add_argument("--input", help="cloud file; default a synthetic room")
    p.add_argument("--points", type=int, default=20000, help="synthetic cloud size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--operator", choices=("va", "gva", "mlp"))
    p.add_argument("--decoder", choices=("sum", "pg", "pgr"))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--operator", required=True, choices=OPERATORS)
    p.add_argument("--points", type=int, default=8)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--neighbors", type=int, default=3)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter count and FLOPs estimate")
    p.add_argument("--config", default="L")
    p.add_argument("--flops-points", type=int, default=100000)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("oracle", help="fast operators vs brute force")
    p.add_argument("--op", required=True, choices=("knn", "fps", "grid"))
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("points", "channels", "neighbors", "repeat"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
            parser.error(f"--{name} must be positive")
    try:
        apply_thread_limit()
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError, AssertionError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"pointhr {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
