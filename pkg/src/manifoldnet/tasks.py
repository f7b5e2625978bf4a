"""Experiment harnesses: model imitation and semi-supervised classification.

Both harnesses report through :class:`MetricsReport`, which renders as
``key=value`` lines and as a JSON summary.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .data import FeatureSet, SplitSpec
from .ems import EmsConfig, run_ems
from .neighbors import make_rng, normalize_l2
from .net import (
    NetworkParams, NetworkSpec, TrainConfig, embed, forward, init_params, reset_pseudo_heads,
    train,
)


def recall_at_1(query, gallery, labels, gallery_labels=None) -> float:
    """Fraction of queries whose nearest gallery item (L2) has the query's label.

    Passing ``gallery=None`` (or the query array itself) searches the query set
    leave-one-out, with ``labels`` serving both sides.
    """
    q = np.asarray(query, dtype=np.float64)
    labels = np.asarray(labels)
    self_search = gallery is None or gallery is query
    g = q if self_search else np.asarray(gallery, dtype=np.float64)
    g_labels = labels if self_search else np.asarray(gallery_labels)
    if q.shape[0] == 0:
        raise ValueError("no queries")
    if g.shape[0] - (1 if self_search else 0) < 1:
        raise ValueError("empty gallery")
    if g.shape[1] != q.shape[1]:
        raise ValueError(f"embedding dimensions differ: {q.shape[1]} vs {g.shape[1]}")
    nn = kernels.nearest_other(q, g, exclude_self=self_search)
    return float(np.mean(g_labels[nn] == labels))


def purity(pseudo, truth) -> float:
    """Sum over clusters of the largest overlap with one true class, divided by N."""
    pseudo = np.asarray(pseudo, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pseudo.shape != truth.shape:
        raise ValueError(f"length mismatch: {pseudo.shape} vs {truth.shape}")
    if pseudo.size == 0:
        raise ValueError("empty label vectors")
    _, p = np.unique(pseudo, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return float(table.max(axis=1).sum() / pseudo.size)


def ensemble_purity(ensemble_labels, truth) -> float:
    """Mean per-trial purity of an N x T pseudo-label matrix."""
    return float(np.mean([purity(col, truth) for col in np.asarray(ensemble_labels).T]))


def accuracy(params: NetworkParams, x, y) -> float:
    sup, _ = forward(params, np.asarray(x))
    return float(np.mean(np.argmax(sup, axis=1) == np.asarray(y)))


@dataclass
class MetricsReport:
    accuracy: float | None = None
    recall_at_1: float | None = None
    purity: float | None = None
    traces: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("accuracy", "recall_at_1", "purity"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def items(self):
        for name in ("accuracy", "recall_at_1", "purity"):
            v = getattr(self, name)
            if v is not None:
                yield name, v
        yield from self.traces.items()

    def to_lines(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.items())

    def to_json(self) -> str:
        return json.dumps(
            {"accuracy": self.accuracy, "recall_at_1": self.recall_at_1, "purity": self.purity,
             "traces": self.traces},
            indent=2, sort_keys=True,
        ) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _derive(seed: int, *keys: int) -> int:
    return int(make_rng(seed, *keys).integers(0, 2**63))


@dataclass
class ImitationSetup:
    """Teacher and student views of the same items, row for row.

    ``eval_indices`` are held out from training and used to measure
    retrieval with the student labels; the remaining rows form the training
    collection whose teacher-space manifold is segmented.
    """

    teacher_features: FeatureSet
    student_features: FeatureSet
    eval_indices: np.ndarray
    ems_cfg: EmsConfig = field(default_factory=EmsConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    hidden_dims: tuple[int, ...] = (64,)
    activation: str = "relu"
    normalize: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.teacher_features.n_samples != self.student_features.n_samples:
            raise ValueError("teacher and student must describe the same items")
        self.eval_indices = np.asarray(self.eval_indices, dtype=np.int64)


def imitation_targets(setup: ImitationSetup):
    """Pseudo-label ensemble of the teacher's training items (the only teacher read)."""
    n = setup.teacher_features.n_samples
    train_idx = np.setdiff1d(np.arange(n), setup.eval_indices)
    teacher = setup.teacher_features.features[train_idx]
    if setup.normalize:
        teacher = normalize_l2(teacher)
    return train_idx, run_ems(teacher, setup.ems_cfg, setup.workers)


def train_student(student: FeatureSet, train_idx, ensemble, eval_indices, ems_cfg: EmsConfig,
                  train_cfg: TrainConfig, hidden_dims=(64,), activation="relu"):
    """Train a network on student inputs against pseudo-labels only and measure retrieval."""
    spec = NetworkSpec(student.dim, tuple(hidden_dims), activation, 0, ems_cfg.t, ems_cfg.z)
    params = init_params(spec, train_cfg.seed)
    x = student.features
    eval_x = x[eval_indices]
    eval_y = student.label_array()[eval_indices]
    if (eval_y < 0).any():
        raise ValueError("every evaluation item needs a label")
    before = recall_at_1(embed(params, eval_x), None, eval_y)
    raw = recall_at_1(eval_x, None, eval_y)
    res = train(params, train_cfg, pseudo=(x[train_idx], ensemble.labels))
    after = recall_at_1(embed(res.params, eval_x), None, eval_y)
    traces = {
        "recall_at_1_before": before,
        "recall_at_1_raw_student": raw,
        "recall_at_1_after": after,
        "final_train_loss": res.losses[-1],
    }
    return res, traces


def run_imitation(setup: ImitationSetup):
    """Segment the teacher's manifold, then train the student on the pseudo tasks alone.

    Labels are read for evaluation only. Returns ``(params, MetricsReport)``;
    ``recall_at_1`` is the trained student's leave-one-out retrieval on the
    evaluation items.
    """
    train_idx, ensemble = imitation_targets(setup)
    teacher_labels = setup.student_features.label_array()[train_idx]
    pur = None
    if (teacher_labels >= 0).all():
        pur = ensemble_purity(ensemble.labels, teacher_labels)
    res, traces = train_student(
        setup.student_features, train_idx, ensemble, setup.eval_indices, setup.ems_cfg,
        setup.train_cfg, setup.hidden_dims, setup.activation,
    )
    return res.params, MetricsReport(recall_at_1=traces["recall_at_1_after"], purity=pur,
                                     traces=traces)


@dataclass
class SemiSupSetup:
    features: FeatureSet
    split: SplitSpec
    ems_cfg: EmsConfig = field(default_factory=EmsConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    refine_rounds: int = 3
    hidden_dims: tuple[int, ...] = (64,)
    activation: str = "relu"
    normalize: bool = False
    workers: int = 1

    def __post_init__(self):
        self.split.check(self.features.n_samples)
        if self.refine_rounds < 1:
            raise ValueError("refine_rounds must be >= 1")
        mask = self.features.labeled_mask
        if not mask[self.split.labeled].all() or not mask[self.split.test].all():
            raise ValueError("labeled and test samples must all carry labels")
        if self.split.labeled.size == 0:
            raise ValueError("the labeled split is empty")


def run_semisup(setup: SemiSupSetup):
    """Iterated joint training with a controlled supervised-only baseline.

    Round 1 segments the raw unlabeled features; later rounds segment the
    L2-normalized representation of the network trained so far, with fresh
    pseudo heads. The baseline starts from the same initialization and sees
    the same labeled batches for the same number of steps, without the
    pseudo stream.
    """
    fs, split = setup.features, setup.split
    labels = fs.label_array()
    x = fs.features
    tcfg, ecfg = setup.train_cfg, setup.ems_cfg
    spec = NetworkSpec(fs.dim, tuple(setup.hidden_dims), setup.activation, fs.n_classes,
                       ecfg.t, ecfg.z)
    joint = init_params(spec, tcfg.seed)
    base = joint.copy()
    labeled = (x[split.labeled], labels[split.labeled])
    x_u = x[split.unlabeled]
    test_x, test_y = x[split.test], labels[split.test]
    steps = math.ceil(max(split.labeled.size, split.unlabeled.size) / tcfg.batch_size)
    truth_u = labels[split.unlabeled]

    traces: dict = {}
    pur = []
    for r in range(1, setup.refine_rounds + 1):
        cfg_r = replace(tcfg, seed=_derive(tcfg.seed, r))
        pseudo = None
        if x_u.shape[0]:
            if r == 1:
                feats = normalize_l2(x_u) if setup.normalize else x_u
            else:
                feats = normalize_l2(embed(joint, x_u))
            ens = run_ems(feats, replace(ecfg, master_seed=_derive(ecfg.master_seed, r)),
                          setup.workers)
            joint = reset_pseudo_heads(joint, ecfg.t, ecfg.z, cfg_r.seed)
            pseudo = (x_u, ens.labels)
            if (truth_u >= 0).all():
                pur.append(ensemble_purity(ens.labels, truth_u))
                traces[f"round_{r}_purity"] = pur[-1]
        res = train(joint, cfg_r, labeled, pseudo, steps_per_epoch=steps)
        joint = res.params
        base = train(base, cfg_r, labeled, None, steps_per_epoch=steps).params
        traces[f"round_{r}_lambda"] = res.lam
        traces[f"round_{r}_test_accuracy"] = accuracy(joint, test_x, test_y)

    traces["baseline_accuracy"] = accuracy(base, test_x, test_y)
    final = traces[f"round_{setup.refine_rounds}_test_accuracy"]
    report = MetricsReport(accuracy=final, purity=pur[-1] if pur else None, traces=traces)
    return joint, report
