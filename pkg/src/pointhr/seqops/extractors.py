"""Neighborhood aggregation: vector attention, grouped vector attention and MLP max-pooling.

Every aggregation over neighbors runs in ascending neighbor-slot order so the
vectorized kernels reproduce a scalar loop exactly.  The first layer of each
weight MLP is applied per point before neighbors are gathered (it is linear,
so ``(q_i - k_j) W = q_i W - k_j W``); this removes the dominant per-relation
matrix product.  ``_tape`` helpers also return what the backward pass needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from ..spatial import NeighborTable
from .kernels import linear, linear_backward, relu

# rows per chunk are chosen so an (rows, K, C) temporary stays near this size
CHUNK_ELEMENTS = 1 << 21


def _indices(table) -> np.ndarray:
    idx = table.indices if isinstance(table, NeighborTable) else np.asarray(table)
    if idx.ndim != 2:
        raise ValueError(f"neighbor table must be 2-D, got shape {idx.shape}")
    return idx


@dataclass(frozen=True)
class LocalExtractInputs:
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    neighbor_table: np.ndarray

    def __post_init__(self):
        shapes = {self.queries.shape, self.keys.shape, self.values.shape}
        if len(shapes) != 1:
            raise ValueError(f"queries/keys/values shapes differ: {shapes}")
        idx = _indices(self.neighbor_table)
        if idx.shape[0] != self.values.shape[0]:
            raise ValueError("neighbor table rows must match the number of points")
        if idx.size and (idx.min() < 0 or idx.max() >= self.values.shape[0]):
            raise ValueError("neighbor index out of range")


def gather_neighbors(features: np.ndarray, table) -> np.ndarray:
    """(M, K, C) tensor with ``out[i, n] = features[table[i, n]]``."""
    idx = _indices(table)
    if idx.size and (idx.min() < 0 or idx.max() >= features.shape[0]):
        raise IndexError("neighbor index out of range")
    return features[idx]


def scatter_neighbors(grad: np.ndarray, table, num_points: int) -> np.ndarray:
    """Adjoint of :func:`gather_neighbors`."""
    idx = _indices(table)
    out = np.zeros((num_points,) + grad.shape[2:])
    np.add.at(out, idx, grad)
    return out


def neighbor_softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax over axis 1 (neighbors) of an (M, K, D) array."""
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    total = e[:, 0]
    for n in range(1, e.shape[1]):
        total = total + e[:, n]
    return e / total[:, None, :]


def _chunks(m, k, c):
    step = max(1, CHUNK_ELEMENTS // max(k * c, 1))
    for start in range(0, m, step):
        yield slice(start, min(m, start + step))


@njit(cache=True, parallel=True)
def _relation_logits_kernel(qw, kw, idx, b0, w1, row_block):
    # logits[i, n] = relu((qw[i] - kw[idx[i, n]]) + b0) @ w1, summed in ascending channel order
    m, kk = idx.shape
    c = qw.shape[1]
    g = w1.shape[1]
    out = np.empty((m, kk, g))
    for blk in prange((m + row_block - 1) // row_block):
        h = np.empty(c)
        for i in range(blk * row_block, min(m, (blk + 1) * row_block)):
            for n in range(kk):
                j = idx[i, n]
                for ch in range(c):
                    p = (qw[i, ch] - kw[j, ch]) + b0[ch]
                    h[ch] = p if p > 0.0 else 0.0
                h0 = h[0]
                for l in range(g):
                    out[i, n, l] = h0 * w1[0, l]
                for ch in range(1, c):
                    hc = h[ch]
                    for l in range(g):
                        out[i, n, l] = out[i, n, l] + hc * w1[ch, l]
    return out


@njit(cache=True, parallel=True)
def _weighted_sum_kernel(weights, v, idx):
    m, kk, g = weights.shape
    c = v.shape[1]
    per = c // g
    out = np.empty((m, c))
    for i in prange(m):
        j = idx[i, 0]
        for l in range(g):
            a = weights[i, 0, l]
            for ch in range(l * per, (l + 1) * per):
                out[i, ch] = a * v[j, ch]
        for n in range(1, kk):
            j = idx[i, n]
            for l in range(g):
                a = weights[i, n, l]
                for ch in range(l * per, (l + 1) * per):
                    out[i, ch] = out[i, ch] + a * v[j, ch]
    return out


def _weighted_sum(weights, values, groups):
    # weights (m, K, g), values (m, K, C) -> (m, C)
    m, kk, c = values.shape
    gv = values.reshape(m, kk, groups, c // groups)
    acc = weights[:, 0, :, None] * gv[:, 0]
    for n in range(1, kk):
        acc = acc + weights[:, n, :, None] * gv[:, n]
    return acc.reshape(m, c)


def _attention_tape(q, k, v, idx, phi, groups, pos):
    """Reference path that keeps every intermediate for the backward pass.

    The relation ``q_i - k_j`` enters phi only through its first linear layer,
    so both sides are projected once per point and subtracted afterwards.
    """
    w0, b0 = phi["w0"], phi["b0"]
    qw, kw = linear(q, w0), linear(k, w0)
    pre = qw[:, None, :] - kw[idx]
    values = v[idx]
    pw = None
    if pos is not None:
        pw = linear(pos, w0)
        pre = pre + pw
        values = values + pos
    pre = pre + b0
    hidden = relu(pre)
    logits = linear(hidden, phi["w1"])
    weights = neighbor_softmax(logits)
    out = _weighted_sum(weights, values, groups)
    return out, (idx, pos, values, pre, hidden, weights)


def _check_attention(q, k, v, phi, groups):
    c = v.shape[1]
    if q.shape != v.shape or k.shape != v.shape:
        raise ValueError("queries, keys and values must share one (M, C) shape")
    if groups < 1 or c % groups:
        raise ValueError(f"groups={groups} must divide the channel count {c}")
    if phi["w0"].shape[0] != c or phi["w1"].shape[1] != groups:
        raise ValueError(
            f"weight MLP maps {phi['w0'].shape[0]} -> {phi['w1'].shape[1]}, expected {c} -> {groups}")


def grouped_attention(q, k, v, table, phi, groups, pos=None, tape=False):
    """Shared kernel of va/gva: one attention logit per group and neighbor."""
    _check_attention(q, k, v, phi, groups)
    idx = _indices(table)
    if tape or pos is not None:
        out, cache = _attention_tape(q, k, v, idx, phi, groups, pos)
        return (out, cache) if tape else out
    q, k, v = (np.ascontiguousarray(a, dtype=np.float64) for a in (q, k, v))
    qw, kw = linear(q, phi["w0"]), linear(k, phi["w0"])
    b0 = np.ascontiguousarray(phi["b0"], dtype=np.float64)
    w1 = np.ascontiguousarray(phi["w1"], dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    out = np.empty_like(v)
    for sl in _chunks(idx.shape[0], idx.shape[1], groups):
        logits = _relation_logits_kernel(qw[sl], kw, idx[sl], b0, w1, 64)
        out[sl] = _weighted_sum_kernel(neighbor_softmax(logits), v, idx[sl])
    return out


def va_extract(queries, keys, values, table, phi, relation: str = "subtract", pos=None):
    """Vector attention: per-channel weights ``phi(q_i - k_j)`` softmaxed over neighbors."""
    if relation != "subtract":
        raise ValueError(f"unsupported relation {relation!r}")
    return grouped_attention(queries, keys, values, table, phi, values.shape[1], pos)


def gva_extract(queries, keys, values, table, phi, groups: int, pos=None):
    """Grouped vector attention: channel group ``l`` shares the weight from logit ``l``."""
    return grouped_attention(queries, keys, values, table, phi, groups, pos)


def attention_backward(dout, q, k, v, phi, groups, cache):
    """Gradients of :func:`grouped_attention` w.r.t. q, k, v, phi and pos."""
    idx, pos, values, pre, hidden, weights = cache
    m, kk, c = values.shape
    gv = values.reshape(m, kk, groups, c // groups)
    dg = dout.reshape(m, 1, groups, c // groups)
    dvalues = (weights[..., None] * dg).reshape(m, kk, c)
    dweights = (dg * gv).sum(axis=-1)
    dlogits = weights * (dweights - (weights * dweights).sum(axis=1, keepdims=True))
    dhidden, dw1, _ = linear_backward(dlogits, hidden, phi["w1"])
    dpre = dhidden * (pre > 0)
    w0 = phi["w0"]
    n = v.shape[0]
    dqw = dpre.sum(axis=1)
    dkw = -scatter_neighbors(dpre, idx, n)
    dw0 = q.T @ dqw + k.T @ dkw
    if pos is not None:
        dw0 = dw0 + pos.reshape(-1, c).T @ dpre.reshape(-1, c)
    return {
        "q": dqw @ w0.T,
        "k": dkw @ w0.T,
        "v": scatter_neighbors(dvalues, idx, n),
        "phi.w0": dw0, "phi.b0": dpre.sum(axis=(0, 1)), "phi.w1": dw1,
        "pos": dpre @ w0.T + dvalues,
    }


def attention_margin(cache) -> float:
    """Distance of the nearest ReLU input to its kink."""
    pre = cache[3]
    return float(np.abs(pre).min()) if pre.size else np.inf


def _mlp_chunk(vw, idx, phi, pos):
    # phi's first layer is applied per point before gathering
    pre = vw[idx]
    if pos is not None:
        pre = pre + linear(pos, phi["w0"])
    pre = pre + phi["b0"]
    hidden = relu(pre)
    emb = linear(hidden, phi["w1"], phi["b1"])
    return emb.max(axis=1), (idx, pos, pre, hidden, emb)


def mlp_extract(values, table, phi, pos=None, tape=False):
    """Channelwise max over neighbors of ``phi(v_j)``."""
    c = values.shape[1]
    if phi["w0"].shape[0] != c or phi["w1"].shape[1] != c:
        raise ValueError("mlp extractor needs a width-preserving weight MLP")
    idx = _indices(table)
    vw = linear(values, phi["w0"])
    if tape:
        return _mlp_chunk(vw, idx, phi, pos)
    out = np.empty((values.shape[0], c))
    for sl in _chunks(*idx.shape, c):
        out[sl] = _mlp_chunk(vw, idx[sl], phi, None if pos is None else pos[sl])[0]
    return out


def mlp_backward(dout, values, phi, cache):
    idx, pos, pre, hidden, emb = cache
    m, kk, c = emb.shape
    arg = emb.argmax(axis=1)
    demb = np.zeros_like(emb)
    rows = np.arange(m)[:, None]
    demb[rows, arg, np.arange(c)[None, :]] = dout
    dhidden, dw1, db1 = linear_backward(demb, hidden, phi["w1"])
    dpre = dhidden * (pre > 0)
    w0 = phi["w0"]
    dvw = scatter_neighbors(dpre, idx, values.shape[0])
    dw0 = values.T @ dvw
    if pos is not None:
        dw0 = dw0 + pos.reshape(-1, c).T @ dpre.reshape(-1, c)
    return {
        "v": dvw @ w0.T,
        "phi.w0": dw0, "phi.b0": dpre.sum(axis=(0, 1)), "phi.w1": dw1, "phi.b1": db1,
        "pos": dpre @ w0.T,
    }


def mlp_margin(cache) -> float:
    """Smallest gap to a non-differentiable point: ReLU kinks or max ties."""
    pre, emb = cache[2], cache[4]
    margin = float(np.abs(pre).min()) if pre.size else np.inf
    if emb.shape[1] > 1:
        top = np.sort(emb, axis=1)
        margin = min(margin, float((top[:, -1] - top[:, -2]).min()))
    return margin
