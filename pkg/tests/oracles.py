"""Naive reference implementations used as test oracles.

Everything here is plain Python loops over scalars.  Summation orders follow
the documented conventions (ascending input channel, ascending neighbor slot)
so results can be compared bit for bit.
"""

import math

import numpy as np


def sqdist(a, b):
    dx = float(b[0]) - float(a[0])
    dy = float(b[1]) - float(a[1])
    dz = float(b[2]) - float(a[2])
    return dx * dx + dy * dy + dz * dz


def knn(source, query, k):
    out = []
    for q in query:
        cands = sorted((sqdist(q, s), j) for j, s in enumerate(source))
        out.append([j for _, j in cands[:k]])
    return np.array(out, dtype=np.int64)


def fps_violations(coords, selected):
    """Steps where the picked point is not a farthest unselected point."""
    bad = []
    chosen = [int(selected[0])]
    for t in range(1, len(selected)):
        def mind(c):
            return min(sqdist(coords[c], coords[s]) for s in chosen)
        best = max(mind(c) for c in range(len(coords)) if c not in chosen)
        if mind(int(selected[t])) < best:
            bad.append(t)
        chosen.append(int(selected[t]))
    return bad


def grid_cells(coords, cell):
    """Dict cell key -> member indices sorted by (x, y, z, index)."""
    cells = {}
    for i, p in enumerate(coords):
        key = tuple(math.floor(float(v) / cell) for v in p)
        cells.setdefault(key, []).append(i)
    for key in cells:
        cells[key].sort(key=lambda i: (coords[i][0], coords[i][1], coords[i][2], i))
    return dict(sorted(cells.items()))


def shifted_mean(values):
    first = values[0]
    acc = 0.0
    for v in values:
        acc = acc + (v - first)
    return first + acc / len(values)


def pool(features, groups, reduce):
    out = []
    for members in groups:
        row = []
        for ch in range(features.shape[1]):
            vals = [float(features[i, ch]) for i in members]
            row.append(max(vals) if reduce == "max" else shifted_mean(vals))
        out.append(row)
    return np.array(out)


def linear_vec(x, w, b=None):
    cin, cout = w.shape
    out = []
    for d in range(cout):
        acc = float(x[0]) * float(w[0, d])
        for c in range(1, cin):
            acc = acc + float(x[c]) * float(w[c, d])
        if b is not None:
            acc = acc + float(b[d])
        out.append(acc)
    return out


def relu_vec(x):
    return [v if v > 0.0 else 0.0 for v in x]


def softmax_column(scores):
    m = max(scores)
    e = [float(np.exp(s - m)) for s in scores]
    total = e[0]
    for v in e[1:]:
        total = total + v
    return [v / total for v in e]


def grouped_attention(q, k, v, table, phi, groups):
    """Attention over the neighbors listed in ``table``; one logit per channel group.

    The relation's first layer is evaluated as ``(q_i W0 - k_j W0) + b0``.
    """
    m, c = v.shape
    per = c // groups
    out = np.zeros((m, c))
    for i in range(m):
        logits = []
        qw = linear_vec(q[i], phi["w0"])
        for j in table[i]:
            kw = linear_vec(k[j], phi["w0"])
            pre = [(qw[d] - kw[d]) + float(phi["b0"][d]) for d in range(len(qw))]
            hidden = relu_vec(pre)
            logits.append(linear_vec(hidden, phi["w1"]))
        for l in range(groups):
            weights = softmax_column([lg[l] for lg in logits])
            for mm in range(per):
                ch = l * per + mm
                acc = weights[0] * float(v[table[i][0], ch])
                for n in range(1, len(table[i])):
                    acc = acc + weights[n] * float(v[table[i][n], ch])
                out[i, ch] = acc
    return out


def mlp_maxpool(v, table, phi):
    m, c = v.shape
    out = np.zeros((m, c))
    for i in range(m):
        embedded = []
        for j in table[i]:
            hidden = relu_vec(linear_vec(v[j], phi["w0"], phi["b0"]))
            embedded.append(linear_vec(hidden, phi["w1"], phi["b1"]))
        for ch in range(c):
            out[i, ch] = max(e[ch] for e in embedded)
    return out


def layer_norm(x, scale, shift, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


def sequence_block(x, table, params, kind, groups):
    """Embed, aggregate, update and residual, composed from the oracles above."""
    def lin(a, name):
        return np.array([linear_vec(row, params[f"{name}.w"], params[f"{name}.b"]) for row in a])

    e = lin(layer_norm(x, params["norm1.scale"], params["norm1.shift"]), "embed")
    phi = {k.split(".")[-1]: v for k, v in params.items() if k.startswith(f"{kind}.phi.")}
    if kind == "mlp":
        h = mlp_maxpool(e, table, phi)
    else:
        q, k, v = (lin(e, f"{kind}.{n}") for n in "qkv")
        h = grouped_attention(q, k, v, table, phi, x.shape[1] if kind == "va" else groups)
    return lin(layer_norm(h, params["norm2.scale"], params["norm2.shift"]), "update") + x
