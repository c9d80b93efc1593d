"""Deterministic dense kernels shared by the sequence blocks and the network.

``linear`` accumulates over input channels in ascending order for every
output element, with no fused multiply-add, so a row's result does not depend
on how many rows are processed together and matches a plain scalar loop
bit for bit.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

NORM_EPS = 1e-6


@njit(cache=True, parallel=True)
def _linear_kernel(x, w, b, has_bias):
    rows, cin = x.shape
    cout = w.shape[1]
    out = np.empty((rows, cout))
    for r in prange(rows):
        x0 = x[r, 0]
        for d in range(cout):
            out[r, d] = x0 * w[0, d]
        for c in range(1, cin):
            xc = x[r, c]
            for d in range(cout):
                out[r, d] = out[r, d] + xc * w[c, d]
        if has_bias:
            for d in range(cout):
                out[r, d] = out[r, d] + b[d]
    return out


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    lead = x.shape[:-1]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, w.shape[0])
    w = np.ascontiguousarray(w, dtype=np.float64)
    if flat.shape[0] == 0:
        return np.zeros(lead + (w.shape[1],))
    if b is None:
        out = _linear_kernel(flat, w, np.zeros(w.shape[1]), False)
    else:
        out = _linear_kernel(flat, w, np.ascontiguousarray(b, dtype=np.float64), True)
    return out.reshape(lead + (w.shape[1],))


def linear_backward(dy, x, w):
    """Gradients of ``x @ w + b``: returns (dx, dw, db)."""
    x2 = x.reshape(-1, w.shape[0])
    dy2 = dy.reshape(-1, w.shape[1])
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def norm_forward(x, scale, shift):
    """Per-row standardization across channels followed by a learned affine map."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv)


def norm_backward(dy, tape, scale):
    xhat, inv = tape
    dxhat = dy * scale
    dscale = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dshift = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, dshift


def mlp2(x, w0, b0, w1, b1=None):
    """Two linear layers with ReLU between; returns (out, pre-activation, hidden)."""
    pre = linear(x, w0, b0)
    hidden = relu(pre)
    return linear(hidden, w1, b1), pre, hidden


def mlp2_backward(dy, x, pre, hidden, w0, w1):
    dh, dw1, db1 = linear_backward(dy, hidden, w1)
    dpre = dh * (pre > 0)
    dx, dw0, db0 = linear_backward(dpre, x, w0)
    return dx, {"w0": dw0, "b0": db0, "w1": dw1, "b1": db1}
