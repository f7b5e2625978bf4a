"""Distances, exact k-nearest-neighbor search and randomly initialized k-means."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import FeatureSet


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` and an optional path of sub-stream keys.

    PCG64 seeded through SeedSequence gives the same stream on every platform;
    distinct key paths give statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_matrix(data) -> np.ndarray:
    if isinstance(data, FeatureSet):
        return data.features
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an N x d matrix, got shape {x.shape}")
    return x


def l2_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(1, -1)
    b = np.asarray(b, dtype=np.float64).reshape(1, -1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return math.sqrt(kernels.sq_dists(a, b)[0, 0])


def normalize_l2(data):
    """Scale every nonzero row to unit L2 norm; zero rows are left as is.

    Returns the same kind of object it was given (FeatureSet or array).
    """
    x = as_matrix(data)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    out = x / np.where(norms > 0, norms, 1.0)[:, None]
    if isinstance(data, FeatureSet):
        return data.with_features(out)
    return out


def knn(data, query_index: int, k: int) -> np.ndarray:
    """The ``k`` nearest other samples to ``query_index``, nearest first.

    Equal distances are broken by ascending sample index.
    """
    x = as_matrix(data)
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k={k} out of range [1, {n - 1}]")
    if not 0 <= query_index < n:
        raise IndexError(f"query index {query_index} out of range")
    d2 = kernels.sq_dists(x, x[query_index:query_index + 1])[:, 0]
    order = np.argsort(d2, kind="stable")
    order = order[order != query_index]
    return order[:k]


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    n_iterations: int
    inertia: float
    inertia_trace: list[float] = field(default_factory=list)


def kmeans(data, z: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-6,
           init=None) -> KMeansResult:
    """Lloyd's algorithm started from ``z`` distinct random samples.

    ``init`` overrides the random draw with explicit sample indices. A cluster
    that loses all its members is reseeded at the sample farthest from its
    assigned centroid, so exactly ``z`` clusters survive.
    """
    x = as_matrix(data)
    n = x.shape[0]
    if not 1 <= z <= n:
        raise ValueError(f"z={z} out of range [1, {n}]")
    if init is None:
        init = rng.choice(n, size=z, replace=False)
    init = np.asarray(init, dtype=np.int64)
    if init.shape != (z,) or np.unique(init).size != z:
        raise ValueError("init must hold z distinct sample indices")
    centroids = x[init].copy()

    labels = None
    trace: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        new_labels, d2 = kernels.assign_nearest(x, centroids)
        inertia = float(d2.sum())
        changed = labels is None or not np.array_equal(new_labels, labels)
        labels = new_labels
        trace.append(inertia)
        if not changed:
            break
        centroids = _update_centroids(x, labels, d2, z, centroids)
        if len(trace) > 1:
            prev = trace[-2]
            if prev <= 0.0 or prev - inertia < tol * prev:
                break

    d2 = kernels.sq_dists(x, centroids)[np.arange(n), labels]
    return KMeansResult(labels, centroids, it, float(d2.sum()), trace)


def _update_centroids(x, labels, d2, z, old):
    sums, counts = kernels.cluster_sums(x, labels, z)
    centroids = old.copy()
    full = counts > 0
    centroids[full] = sums[full] / counts[full, None]
    if not full.all():
        far = d2.copy()
        for c in np.flatnonzero(~full):
            i = int(np.argmax(far))
            centroids[c] = x[i]
            far[i] = -1.0
    return centroids
