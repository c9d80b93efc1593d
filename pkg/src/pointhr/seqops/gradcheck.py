"""Central finite-difference checks of the analytic backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .block import block_margin, block_param_shapes, sequence_block_backward, sequence_block_forward
from .extractors import (attention_backward, attention_margin, grouped_attention, mlp_backward,
                         mlp_extract, mlp_margin)
from .kernels import linear, linear_backward

OPERATORS = ("linear", "va", "gva", "mlp", "block-va", "block-gva", "block-mlp")
THRESHOLD = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: str
    per_tensor: dict[str, float] = field(default_factory=dict)
    failure: str | None = None
    resamples: int = 0
    max_elementwise_error: float = 0.0

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error < THRESHOLD


def finite_diff_check(fn, tensors: dict[str, np.ndarray], eps: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``sum(fn(tensors))`` against central differences.

    ``fn(tensors)`` returns ``(output, backward)`` and ``backward(dout)`` returns
    a gradient for every key of ``tensors``.  A tensor's error is
    ``max|a - n| / max(max|a|, max|n|, 1e-8)``, so structurally zero entries
    (where the central difference only sees roundoff) cannot dominate; the
    report keeps the maximum over tensors and also the worst single element
    under the same floor for diagnostics.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    tensors = {k: np.array(v, dtype=np.float64) for k, v in tensors.items()}
    out, backward = fn(tensors)
    analytic = backward(np.ones_like(out))
    report = GradCheckReport(0.0, "")
    for name, value in tensors.items():
        grad = np.asarray(analytic[name])
        if grad.shape != value.shape:
            report.failure = f"{name}: gradient shape {grad.shape} != {value.shape}"
            return report
        if not np.isfinite(grad).all():
            report.failure = f"{name}: non-finite analytic gradient"
            return report
        numeric = np.empty_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn(tensors)[0].sum()
            flat[i] = orig - eps
            minus = fn(tensors)[0].sum()
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
        if not np.isfinite(numeric).all():
            report.failure = f"{name}: non-finite numeric gradient"
            return report
        if not grad.size:
            continue
        diff = np.abs(grad - numeric)
        scale = max(float(np.abs(grad).max()), float(np.abs(numeric).max()), 1e-8)
        err = float(diff.max()) / scale
        elementwise = diff / np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-8)
        report.max_elementwise_error = max(report.max_elementwise_error, float(elementwise.max()))
        report.per_tensor[name] = err
        if err >= report.max_rel_error:
            report.max_rel_error, report.worst_tensor = err, name
    return report


def random_table(rng, points: int, k: int) -> np.ndarray:
    """Valid neighbor table whose first column is the point itself."""
    rows = []
    for i in range(points):
        others = np.delete(np.arange(points), i)
        if len(others) == 0:
            others = np.array([i])
        extra = rng.choice(others, size=k - 1, replace=k - 1 > len(others))
        rows.append(np.concatenate(([i], extra)))
    return np.array(rows, dtype=np.int64).reshape(points, k)


def _attention_case(rng, m, c, k, groups, kind):
    idx = random_table(rng, m, k)
    out_w = c if kind == "va" else groups
    tensors = {"q": rng.normal(size=(m, c)), "k": rng.normal(size=(m, c)),
               "v": rng.normal(size=(m, c)), "phi.w0": rng.normal(size=(c, c)) / np.sqrt(c),
               "phi.b0": rng.normal(size=c) * 0.1, "phi.w1": rng.normal(size=(c, out_w)) / np.sqrt(c)}
    g = out_w

    def fn(t):
        phi = {"w0": t["phi.w0"], "b0": t["phi.b0"], "w1": t["phi.w1"]}
        out, cache = grouped_attention(t["q"], t["k"], t["v"], idx, phi, g, tape=True)

        def backward(dout):
            return attention_backward(dout, t["q"], t["k"], t["v"], phi, g, cache)

        return out, backward

    def margin(t):
        phi = {"w0": t["phi.w0"], "b0": t["phi.b0"], "w1": t["phi.w1"]}
        return attention_margin(grouped_attention(t["q"], t["k"], t["v"], idx, phi, g, tape=True)[1])

    return fn, tensors, margin


def _mlp_case(rng, m, c, k):
    idx = random_table(rng, m, k)
    tensors = {"v": rng.normal(size=(m, c)), "phi.w0": rng.normal(size=(c, c)) / np.sqrt(c),
               "phi.b0": rng.normal(size=c) * 0.1, "phi.w1": rng.normal(size=(c, c)) / np.sqrt(c),
               "phi.b1": rng.normal(size=c) * 0.1}

    def phi_of(t):
        return {n: t[f"phi.{n}"] for n in ("w0", "b0", "w1", "b1")}

    def fn(t):
        out, cache = mlp_extract(t["v"], idx, phi_of(t), tape=True)
        return out, lambda dout: mlp_backward(dout, t["v"], phi_of(t), cache)

    def margin(t):
        return mlp_margin(mlp_extract(t["v"], idx, phi_of(t), tape=True)[1])

    return fn, tensors, margin


def _block_case(rng, m, c, k, groups, kind, pos_encoding):
    idx = random_table(rng, m, k)
    coords = rng.random((m, 3))
    tensors = {"features": rng.normal(size=(m, c))}
    for name, shape, init in block_param_shapes(c, kind, groups, pos_encoding):
        if init == "weight":
            tensors[name] = rng.normal(size=shape) / np.sqrt(shape[0])
        else:
            tensors[name] = (1.0 if init == "ones" else 0.0) + 0.1 * rng.normal(size=shape)

    def split(t):
        return t["features"], {n: v for n, v in t.items() if n != "features"}

    def fn(t):
        x, params = split(t)
        out, tape = sequence_block_forward(x, coords, idx, params, kind, groups, tape=True)
        return out, lambda dout: sequence_block_backward(dout, params, kind, tape)

    def margin(t):
        x, params = split(t)
        return block_margin(sequence_block_forward(x, coords, idx, params, kind, groups, tape=True)[1])

    return fn, tensors, margin


def _linear_case(rng, m, c):
    tensors = {"x": rng.normal(size=(m, c)), "w": rng.normal(size=(c, c)), "b": rng.normal(size=c)}

    def fn(t):
        out = linear(t["x"], t["w"], t["b"])

        def backward(dout):
            dx, dw, db = linear_backward(dout, t["x"], t["w"])
            return {"x": dx, "w": dw, "b": db}

        return out, backward

    return fn, tensors, lambda t: np.inf


def build_case(operator, rng, points, channels, neighbors, groups=None, pos_encoding=False):
    if groups is None:
        groups = max(1, channels // 4)
    if operator == "linear":
        return _linear_case(rng, points, channels)
    if operator in ("va", "gva"):
        return _attention_case(rng, points, channels, neighbors, groups, operator)
    if operator == "mlp":
        return _mlp_case(rng, points, channels, neighbors)
    if operator.startswith("block-"):
        return _block_case(rng, points, channels, neighbors, groups, operator[6:], pos_encoding)
    raise ValueError(f"unknown operator {operator!r}; expected one of {OPERATORS}")


def gradcheck(operator: str, points: int = 8, channels: int = 4, neighbors: int = 3,
              eps: float = 1e-6, seed: int = 0, groups: int | None = None,
              pos_encoding: bool = False, max_resamples: int = 100) -> GradCheckReport:
    """Draw a random case, re-drawing while any kink or max tie sits within reach of ``eps``."""
    rng = np.random.default_rng(seed)
    margin_needed = max(1e-6, 20 * eps)
    for attempt in range(max_resamples + 1):
        fn, tensors, margin = build_case(operator, rng, points, channels, neighbors, groups,
                                         pos_encoding)
        if margin(tensors) >= margin_needed:
            report = finite_diff_check(fn, tensors, eps)
            report.resamples = attempt
            return report
    raise RuntimeError(f"could not draw a smooth {operator} case in {max_resamples} tries")
