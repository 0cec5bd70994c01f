"""Independent references for tests.

The scalar helpers use plain Python loops over floats. ``fd_check`` differentiates
the package's loss value numerically and compares the result with its analytic
gradients.
"""
import math

import numpy as np

from fedprok.nn import ModelParams as _ModelParams, loss_and_grads as _loss_and_grads


def affine_relu_chain(layers, x):
    h = [float(v) for v in x]
    for w, b in layers:
        out = []
        for i in range(len(w)):
            s = float(b[i])
            for j in range(len(h)):
                s += float(w[i][j]) * h[j]
            out.append(s if s > 0 else 0.0)
        h = out
    return h


def affine(w, b, x):
    out = []
    for i in range(len(w)):
        s = float(b[i])
        for j in range(len(x)):
            s += float(w[i][j]) * float(x[j])
        out.append(s)
    return out


def mean_of(arrays):
    """Elementwise mean of equally shaped nested lists (1-D or 2-D)."""
    n = len(arrays)
    first = arrays[0]
    if hasattr(first[0], "__len__"):
        return [[sum(float(a[i][j]) for a in arrays) / n for j in range(len(first[0]))] for i in range(len(first))]
    return [sum(float(a[i]) for a in arrays) / n for i in range(len(first))]


def weighted_mean(vectors, counts):
    total = sum(counts)
    dim = len(vectors[0])
    out = [0.0] * dim
    for v, c in zip(vectors, counts):
        for i in range(dim):
            out[i] += (c / total) * float(v[i])
    return out


def cosine(a, b):
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def nearest_by_cosine(prev, candidates):
    best, best_sim = None, -2.0
    for c in sorted(candidates):
        s = cosine(prev, candidates[c])
        if s > best_sim:
            best, best_sim = c, s
    return best


def translate(rows, mu_n, mu_p):
    return [[float(r[i]) + (float(mu_p[i]) - float(mu_n[i])) for i in range(len(r))] for r in rows]


def cross_entropy(params_layers, head, x_rows, labels, through_extractor=True):
    """Mean softmax cross-entropy computed sample by sample."""
    total = 0.0
    for x, y in zip(x_rows, labels):
        f = affine_relu_chain(params_layers, x) if through_extractor else [float(v) for v in x]
        s = affine(head[0], head[1], f)
        m = max(s)
        lse = m + math.log(sum(math.exp(v - m) for v in s))
        total += lse - s[y]
    return total / len(labels)


def fd_check(p, x, y, train_extractor, eps=1e-5):
    """Worst relative error of analytic against central-difference gradients.

    Covers every parameter entry and every input coordinate. The relative error
    is floored at an absolute scale of 1 so near-zero gradients do not blow up.
    """
    loss_fn = lambda q, xx: _loss_and_grads(q, xx, y, train_extractor)[0]
    _, g = _loss_and_grads(p, x, y, train_extractor, want_input_grad=True)
    layers = [list(map(np.array, pair)) for pair in p.layers()]
    worst = 0.0

    def rebuild(ls):
        return _ModelParams(tuple(tuple(l) for l in ls[:-1]), tuple(ls[-1]))

    targets = [(li, k) for li in range(len(layers)) for k in range(2)]
    grads = [a for pair in g.layers() for a in pair]
    for (li, k), ga in zip(targets, grads):
        arr = layers[li][k]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = loss_fn(rebuild(layers), x)
            arr[idx] = old - eps
            down = loss_fn(rebuild(layers), x)
            arr[idx] = old
            worst = max(worst, _rel((up - down) / (2 * eps), ga[idx]))
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        worst = max(worst, _rel((loss_fn(p, xp) - loss_fn(p, xm)) / (2 * eps), g.input_grad[idx]))
    return worst


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))
