"""Ensemble manifold segmentation.

Each trial positions Z seeds with randomly initialized k-means, grows every
seed into a prototype set with its K nearest neighbors, fits a multinomial
logistic regression on the prototypes and uses it to label every sample.
T such trials give an N x T pseudo-label ensemble.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import PseudoLabelEnsemble
from .errors import ConfigError, DivergenceError
from .neighbors import as_matrix, kmeans, knn, make_rng

MAX_RETRIES = 3


@dataclass(frozen=True)
class EmsConfig:
    z: int = 30
    t: int = 90
    k: int = 9
    lr_reg: float = 1e-3
    lr_iters: int = 500
    master_seed: int = 0
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    kmeans_restarts: int = 10

    def __post_init__(self):
        if self.z < 2:
            raise ConfigError(f"ems.z must be >= 2, got {self.z}")
        if self.t < 1:
            raise ConfigError(f"ems.t must be >= 1, got {self.t}")
        if self.k < 0:
            raise ConfigError(f"ems.k must be >= 0, got {self.k}")
        if self.lr_reg < 0 or not math.isfinite(self.lr_reg):
            raise ConfigError(f"ems.lr_reg must be a finite value >= 0, got {self.lr_reg}")
        if self.lr_iters < 1:
            raise ConfigError(f"ems.lr_iters must be >= 1, got {self.lr_iters}")
        if self.kmeans_restarts < 1:
            raise ConfigError(f"ems.kmeans_restarts must be >= 1, got {self.kmeans_restarts}")

    def check(self, n_samples: int) -> None:
        """Raise unless every trial's prototype set fits in ``n_samples``."""
        if self.z * (self.k + 1) > n_samples:
            raise ConfigError(
                f"ems.z * (ems.k + 1) = {self.z * (self.k + 1)} exceeds N={n_samples}"
            )


@dataclass(frozen=True)
class SeedSet:
    """One trial's prototype training set as parallel (sample, pseudo-class) arrays."""

    trial_id: int
    indices: np.ndarray
    classes: np.ndarray

    @property
    def members(self) -> list[tuple[int, int]]:
        return list(zip(self.indices.tolist(), self.classes.tolist()))


@dataclass(frozen=True)
class LinearSegmenter:
    weights: np.ndarray  # (Z, d)
    biases: np.ndarray  # (Z,)

    def scores(self, x) -> np.ndarray:
        return x @ self.weights.T + self.biases


def select_seeds(data, z: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-6,
                 init=None, restarts: int = 1) -> np.ndarray:
    """Sample indices nearest to each k-means centroid, one per cluster.

    With ``restarts > 1`` k-means is rerun from fresh random draws and the
    lowest-inertia solution is kept (first one on ties). An explicit ``init``
    means a single run.

    Candidates are restricted to the cluster's own members, which keeps the Z
    seeds distinct. Equal distances go to the lowest sample index.
    """
    x = as_matrix(data)
    res = kmeans(x, z, rng, max_iter=max_iter, tol=tol, init=init)
    if init is None:
        for _ in range(restarts - 1):
            cand = kmeans(x, z, rng, max_iter=max_iter, tol=tol)
            if cand.inertia < res.inertia:
                res = cand
    d2 = kernels.sq_dists(x, res.centroids)
    seeds = np.empty(z, dtype=np.int64)
    for c in range(z):
        members = np.flatnonzero(res.assignments == c)
        if members.size == 0:
            # reseeded on the final update; no member owns it yet
            members = np.setdiff1d(np.arange(x.shape[0]), seeds[:c])
        seeds[c] = members[np.argmin(d2[members, c])]
    return seeds


def grow_seeds(data, seeds, k: int, trial_id: int = 0) -> SeedSet:
    """Each seed plus its ``k`` nearest neighbors, all labeled with the seed's class.

    A sample may appear under more than one pseudo-class.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    if np.unique(seeds).size != seeds.size:
        raise ValueError("seeds must be distinct")
    x = as_matrix(data)
    idx, cls = [], []
    for c, s in enumerate(seeds):
        idx.append(s)
        cls.append(c)
        if k > 0:
            nb = knn(x, int(s), k)
            idx.extend(nb.tolist())
            cls.extend([c] * k)
    return SeedSet(trial_id, np.asarray(idx, dtype=np.int64), np.asarray(cls, dtype=np.int64))


def segmenter_objective(x, y, weights, biases, lr_reg):
    """Mean softmax cross-entropy plus ``lr_reg * ||W||^2`` and its gradient.

    Returns ``(loss, grad_weights, grad_biases)``. Biases are not penalized.
    """
    return kernels.softmax_xent(x, y, weights, biases, lr_reg)


def train_segmenter(data, seed_set: SeedSet, cfg: EmsConfig) -> LinearSegmenter:
    """Multinomial logistic regression fit by full-batch gradient descent from zero.

    Fitting happens on prototype features centered and divided by their RMS
    spread, one scale for all dimensions, so the penalty does not depend on
    feature units; the returned weights act on raw features. The step starts
    at ten times the inverse of a curvature bound and is halved whenever it
    fails to decrease the objective.
    """
    x = as_matrix(data)[seed_set.indices]
    y = seed_set.classes
    mu = x.mean(axis=0)
    sd = math.sqrt(float(np.mean((x - mu) ** 2)))
    if sd == 0.0:
        sd = 1.0
    xs = (x - mu) / sd
    w = np.zeros((cfg.z, x.shape[1]))
    b = np.zeros(cfg.z)
    lip = 0.5 * (1.0 + float(np.max(np.einsum("ij,ij->i", xs, xs)))) + 2.0 * cfg.lr_reg
    step = 10.0 / lip
    f, gw, gb = segmenter_objective(xs, y, w, b, cfg.lr_reg)
    if not math.isfinite(f):
        raise DivergenceError(f"trial {seed_set.trial_id}: non-finite segmenter loss")
    for _ in range(cfg.lr_iters):
        while step > 1e-14:
            w1, b1 = w - step * gw, b - step * gb
            f1, gw1, gb1 = segmenter_objective(xs, y, w1, b1, cfg.lr_reg)
            if not math.isfinite(f1):
                raise DivergenceError(f"trial {seed_set.trial_id}: non-finite segmenter loss")
            if f1 < f:
                break
            step *= 0.5
        else:
            break
        converged = f - f1 <= 1e-12 * abs(f)
        w, b, f, gw, gb = w1, b1, f1, gw1, gb1
        if converged:
            break
    w_raw = w / sd
    return LinearSegmenter(w_raw, b - w_raw @ mu)


def segment_all(data, seg: LinearSegmenter) -> np.ndarray:
    """Arg-max pseudo-class for every sample; ties go to the lowest class id."""
    x = as_matrix(data)
    if x.shape[1] != seg.weights.shape[1]:
        raise ValueError(f"segmenter expects dimension {seg.weights.shape[1]}, got {x.shape[1]}")
    return np.argmax(seg.scores(x), axis=1).astype(np.int64)


@dataclass
class TrialResult:
    labels: np.ndarray
    seeds: np.ndarray
    seed_set: SeedSet
    segmenter: LinearSegmenter
    attempts: int


def run_trial(data, cfg: EmsConfig, trial: int) -> TrialResult:
    """One segmentation trial, retried with a fresh derived seed on divergence."""
    x = as_matrix(data)
    for attempt in range(MAX_RETRIES + 1):
        rng = make_rng(cfg.master_seed, trial, attempt)
        seeds = select_seeds(x, cfg.z, rng, cfg.kmeans_max_iter, cfg.kmeans_tol,
                             restarts=cfg.kmeans_restarts)
        seed_set = grow_seeds(x, seeds, cfg.k, trial)
        try:
            seg = train_segmenter(x, seed_set, cfg)
        except DivergenceError:
            continue
        return TrialResult(segment_all(x, seg), seeds, seed_set, seg, attempt + 1)
    raise DivergenceError(f"trial {trial} diverged on {MAX_RETRIES + 1} attempts")


def run_ems(data, cfg: EmsConfig, workers: int = 1) -> PseudoLabelEnsemble:
    """Run all T trials and stack their labels into an N x T ensemble.

    Trial t always uses the generator derived from ``(master_seed, t)``, so
    the result does not depend on ``workers``.
    """
    x = as_matrix(data)
    cfg.check(x.shape[0])
    out = np.empty((x.shape[0], cfg.t), dtype=np.int64)

    def one(t):
        out[:, t] = run_trial(x, cfg, t).labels

    if workers <= 1 or cfg.t == 1:
        for t in range(cfg.t):
            one(t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(cfg.t)))
    return PseudoLabelEnsemble(out, cfg.z)
