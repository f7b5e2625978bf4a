"""Pure NumPy versions of the compiled kernels.

Distances are accumulated one feature at a time, which reproduces the
summation order of the compiled loops exactly.
"""
import numpy as np


def sq_dists(x, c):
    out = np.zeros((x.shape[0], c.shape[0]), dtype=np.float64)
    for k in range(x.shape[1]):
        diff = x[:, k, None] - c[None, :, k]
        out += diff * diff
    return out


def assign_nearest(x, c):
    d2 = sq_dists(x, c)
    labels = np.argmin(d2, axis=1).astype(np.int64)
    return labels, d2[np.arange(x.shape[0]), labels]


def cluster_sums(x, labels, z):
    sums = np.zeros((z, x.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=z).astype(np.int64)
    return sums, counts


def nearest_other(q, g, exclude_self):
    d2 = sq_dists(q, g)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    return np.argmin(d2, axis=1).astype(np.int64)


def softmax_xent(x, y, w, b, reg):
    n = x.shape[0]
    s = x @ w.T + b
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    tot = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(tot[:, 0])
    loss = float(np.mean(lse - s[np.arange(n), y])) + reg * float(np.sum(w * w))
    p = e / tot
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, p.T @ x + 2.0 * reg * w, p.sum(axis=0)
