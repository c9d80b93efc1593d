"""The sequence block: normalize, embed, aggregate over neighbors, normalize, update, add residual."""

from __future__ import annotations

import numpy as np

from .extractors import (_indices, attention_backward, grouped_attention, mlp_backward,
                         mlp_extract, scatter_neighbors)
from .kernels import linear, linear_backward, mlp2, mlp2_backward, norm_backward, norm_forward

KINDS = ("va", "gva", "mlp")


def block_param_shapes(channels: int, kind: str, groups: int = 1, pos_encoding: bool = False):
    """``(local name, shape, init)`` for every tensor of one block.

    ``init`` is ``weight`` (uniform fan-in), ``zeros`` or ``ones``.
    """
    c = channels
    if kind not in KINDS:
        raise ValueError(f"unknown operator kind {kind!r}")
    if kind == "gva" and c % groups:
        raise ValueError(f"groups={groups} does not divide channels={c}")
    specs = [("norm1.scale", (c,), "ones"), ("norm1.shift", (c,), "zeros"),
             ("embed.w", (c, c), "weight"), ("embed.b", (c,), "zeros")]
    if kind == "mlp":
        specs += [(f"{kind}.phi.w0", (c, c), "weight"), (f"{kind}.phi.b0", (c,), "zeros"),
                  (f"{kind}.phi.w1", (c, c), "weight"), (f"{kind}.phi.b1", (c,), "zeros")]
    else:
        out = c if kind == "va" else groups
        for name in ("q", "k", "v"):
            specs += [(f"{kind}.{name}.w", (c, c), "weight"), (f"{kind}.{name}.b", (c,), "zeros")]
        # a bias on the attention logits would cancel in the softmax, so phi.w1 has none
        specs += [(f"{kind}.phi.w0", (c, c), "weight"), (f"{kind}.phi.b0", (c,), "zeros"),
                  (f"{kind}.phi.w1", (c, out), "weight")]
    if pos_encoding:
        specs += [(f"{kind}.pos.w0", (3, c), "weight"), (f"{kind}.pos.b0", (c,), "zeros"),
                  (f"{kind}.pos.w1", (c, c), "weight"), (f"{kind}.pos.b1", (c,), "zeros")]
    specs += [("norm2.scale", (c,), "ones"), ("norm2.shift", (c,), "zeros"),
              ("update.w", (c, c), "weight"), ("update.b", (c,), "zeros")]
    return specs


def _phi(params, kind):
    head = f"{kind}.phi."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def _relative_positions(coords, idx):
    return coords[:, None, :] - coords[idx]


def sequence_block_forward(features, coords, table, params, kind: str, groups: int = 1,
                           tape: bool = False):
    """Apply one block to (M, C) features whose neighbors are given by ``table``.

    ``params`` maps the local names of :func:`block_param_shapes` to arrays;
    positional encoding is used exactly when ``{kind}.pos.w0`` is present.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown operator kind {kind!r}")
    idx = _indices(table)
    x = np.asarray(features, dtype=np.float64)
    if idx.shape[0] != x.shape[0]:
        raise ValueError(f"table has {idx.shape[0]} rows for {x.shape[0]} points")
    n1, n1_tape = norm_forward(x, params["norm1.scale"], params["norm1.shift"])
    e = linear(n1, params["embed.w"], params["embed.b"])
    pos = pos_tape = None
    if f"{kind}.pos.w0" in params:
        rp = _relative_positions(np.asarray(coords, dtype=np.float64), idx)
        pos, pos_pre, pos_hidden = mlp2(rp, params[f"{kind}.pos.w0"], params[f"{kind}.pos.b0"],
                                        params[f"{kind}.pos.w1"], params[f"{kind}.pos.b1"])
        pos_tape = (rp, pos_pre, pos_hidden)
    phi = _phi(params, kind)
    if kind == "mlp":
        q = k = v = None
        res = mlp_extract(e, idx, phi, pos, tape=tape)
    else:
        q = linear(e, params[f"{kind}.q.w"], params[f"{kind}.q.b"])
        k = linear(e, params[f"{kind}.k.w"], params[f"{kind}.k.b"])
        v = linear(e, params[f"{kind}.v.w"], params[f"{kind}.v.b"])
        g = x.shape[1] if kind == "va" else groups
        res = grouped_attention(q, k, v, idx, phi, g, pos, tape=tape)
    h, ext_tape = res if tape else (res, None)
    n2, n2_tape = norm_forward(h, params["norm2.scale"], params["norm2.shift"])
    out = linear(n2, params["update.w"], params["update.b"]) + x
    assert np.isfinite(out).all(), "non-finite block output"
    if not tape:
        return out
    return out, dict(x=x, n1=n1, n1_tape=n1_tape, e=e, q=q, k=k, v=v, pos_tape=pos_tape,
                     ext=ext_tape, h=h, n2=n2, n2_tape=n2_tape, idx=idx, groups=groups)


def sequence_block_backward(dout, params, kind, tape):
    """Gradients w.r.t. the block input (key ``features``) and every parameter."""
    grads = {}
    dn2, grads["update.w"], grads["update.b"] = linear_backward(dout, tape["n2"], params["update.w"])
    dh, grads["norm2.scale"], grads["norm2.shift"] = norm_backward(
        dn2, tape["n2_tape"], params["norm2.scale"])
    phi = _phi(params, kind)
    if kind == "mlp":
        g = mlp_backward(dh, tape["e"], phi, tape["ext"])
        de = g["v"]
    else:
        groups = tape["x"].shape[1] if kind == "va" else tape["groups"]
        g = attention_backward(dh, tape["q"], tape["k"], tape["v"], phi, groups, tape["ext"])
        de = np.zeros_like(tape["e"])
        for name in ("q", "k", "v"):
            dx, grads[f"{kind}.{name}.w"], grads[f"{kind}.{name}.b"] = linear_backward(
                g[name], tape["e"], params[f"{kind}.{name}.w"])
            de += dx
    for name in phi:
        grads[f"{kind}.phi.{name}"] = g[f"phi.{name}"]
    if tape["pos_tape"] is not None:
        rp, pre, hidden = tape["pos_tape"]
        _, pg = mlp2_backward(g["pos"], rp, pre, hidden, params[f"{kind}.pos.w0"],
                              params[f"{kind}.pos.w1"])
        for name, value in pg.items():
            grads[f"{kind}.pos.{name}"] = value
    dn1, grads["embed.w"], grads["embed.b"] = linear_backward(de, tape["n1"], params["embed.w"])
    dx, grads["norm1.scale"], grads["norm1.shift"] = norm_backward(
        dn1, tape["n1_tape"], params["norm1.scale"])
    grads["features"] = dx + dout
    return grads


def block_margin(tape) -> float:
    """Closest approach to a non-differentiable point anywhere in the block."""
    from .extractors import attention_margin, mlp_margin

    ext = tape["ext"]
    margin = mlp_margin(ext) if tape["q"] is None else attention_margin(ext)
    if tape["pos_tape"] is not None:
        margin = min(margin, float(np.abs(tape["pos_tape"][1]).min()))
    return margin


__all__ = ["block_param_shapes", "sequence_block_forward", "sequence_block_backward",
           "block_margin", "scatter_neighbors", "KINDS"]
