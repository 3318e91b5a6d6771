"""Slow, obviously-correct reference implementations used by the tests."""

import itertools

import numpy as np


def conv_nested(x, w, stride):
    """Valid cross-correlation by explicit loops over output positions."""
    f, c, k, _ = w.shape
    _, h, wd = x.shape
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((f, oh, ow))
    for o, i, j in itertools.product(range(f), range(oh), range(ow)):
        acc = 0.0
        for ch in range(c):
            window = x[ch, i * stride:i * stride + k, j * stride:j * stride + k]
            acc += float(np.sum(window.astype(np.float64) * w[o, ch]))
        out[o, i, j] = acc
    return out


def pool_nested(x, k):
    c, h, w = x.shape
    oh, ow = h // k, w // k
    out = np.empty((c, oh, ow))
    for ch, i, j in itertools.product(range(c), range(oh), range(ow)):
        out[ch, i, j] = max(x[ch, i * k + a, j * k + b] for a in range(k) for b in range(k))
    return out


def forward_nested(genome, weights, image):
    """Per-layer flattened features of one image."""
    x = image.astype(np.float32)
    feats = []
    for i, gene in enumerate(genome.layers):
        if gene.is_conv:
            y = np.maximum(conv_nested(x, weights.layers[i].weight, gene.stride), 0.0)
        else:
            y = pool_nested(x, gene.kernel)
        x = y.astype(np.float32)
        feats.append(x.reshape(-1))
    return feats


def ridge_normal_equations(X, Y, lam):
    """argmin ||Y - XW - 1b'||^2 + lam ||W||^2 via centered normal equations."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    W = np.linalg.inv(Xc.T @ Xc + lam * np.eye(X.shape[1])) @ Xc.T @ Yc
    return W, ym - xm @ W


def ranks_bruteforce(v):
    """Average (fractional) ranks, 1-based, by counting."""
    v = list(v)
    out = []
    for a in v:
        less = sum(1 for b in v if b < a)
        equal = sum(1 for b in v if b == a)
        out.append(less + (equal + 1) / 2.0)
    return np.array(out)


def pearson_bruteforce(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return 0.0
    return sxy / (sxx * syy) ** 0.5


def rdm_bruteforce(patterns):
    n = len(patterns)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i, j] = 1.0 - pearson_bruteforce(list(patterns[i]), list(patterns[j]))
    return out
