import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from manifoldnet.data import FeatureSet, SplitSpec
from manifoldnet.ems import EmsConfig
from manifoldnet.errors import ConfigError
from manifoldnet.net import TrainConfig
from manifoldnet.neighbors import make_rng
from manifoldnet.tasks import (
    ImitationSetup, MetricsReport, SemiSupSetup, ensemble_purity, purity, recall_at_1,
    run_imitation, run_semisup, train_student, imitation_targets,
)

from .conftest import gaussian_blobs


def brute_recall(q, g, ql, gl, self_search):
    hits = 0
    for i in range(len(q)):
        best, best_d = None, None
        for j in range(len(g)):
            if self_search and i == j:
                continue
            d = 0.0
            for a, b in zip(q[i], g[j]):
                d += (a - b) * (a - b)
            if best_d is None or d < best_d:
                best, best_d = j, d
        hits += gl[best] == ql[i]
    return hits / len(q)


def test_recall_tight_clusters_is_one():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    assert recall_at_1(x, None, [0, 0, 1, 1]) == 1.0


def test_recall_interleaved_is_zero():
    assert recall_at_1(np.array([[0.0], [1.0], [3.0], [4.0]]), None, [0, 1, 1, 0]) == 0.0


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 50), sep=st.booleans())
def test_recall_matches_oracle(seed, n, sep):
    rng = make_rng(seed)
    q = rng.integers(-2, 3, size=(n, 2)).astype(float)
    ql = rng.integers(0, 3, size=n)
    if sep:
        g = rng.normal(size=(7, 2))
        gl = rng.integers(0, 3, size=7)
        assert recall_at_1(q, g, ql, gl) == brute_recall(q, g, ql, gl, False)
    else:
        assert recall_at_1(q, None, ql) == brute_recall(q, q, ql, ql, True)


def test_recall_errors():
    with pytest.raises(ValueError, match="empty gallery"):
        recall_at_1(np.zeros((1, 2)), None, [0])
    with pytest.raises(ValueError):
        recall_at_1(np.zeros((2, 2)), np.zeros((2, 3)), [0, 1], [0, 1])


def test_purity_examples():
    assert purity([0, 0, 1, 1], [0, 1, 0, 1]) == 0.5
    assert purity([3, 3, 5], [1, 1, 2]) == 1.0
    assert purity(np.arange(7), [0] * 7) == 1.0
    with pytest.raises(ValueError):
        purity([0], [0, 1])


@given(seed=st.integers(0, 2**32 - 1))
def test_purity_in_unit_interval(seed):
    rng = make_rng(seed)
    p = purity(rng.integers(0, 5, size=30), rng.integers(0, 3, size=30))
    assert 1 / 3 <= p <= 1.0


def test_metrics_report_rendering():
    r = MetricsReport(accuracy=0.5, traces={"round_1_test_accuracy": 0.25, "n": 3})
    assert r.to_lines() == "accuracy=0.500000\nround_1_test_accuracy=0.250000\nn=3\n"
    data = json.loads(r.to_json())
    assert data["accuracy"] == 0.5 and data["recall_at_1"] is None
    with pytest.raises(ValueError):
        MetricsReport(purity=1.5)


def small_semisup(labeled_all=False, rounds=2):
    x, y = gaussian_blobs(4, n_per_class=40, n_classes=3, dim=4, spread=6.0)
    fs = FeatureSet(x, y, 3)
    idx = make_rng(0).permutation(120)
    if labeled_all:
        split = SplitSpec(idx[:90], [], idx[90:])
    else:
        split = SplitSpec(idx[:9], idx[9:90], idx[90:])
    return SemiSupSetup(fs, split, EmsConfig(z=4, t=3, k=3, kmeans_restarts=2),
                        TrainConfig(epochs=3, learning_rate=0.05), rounds, (8,), "tanh")


def test_semisup_report_entries():
    params, rep = run_semisup(small_semisup(rounds=3))
    keys = [k for k in rep.traces if k.endswith("test_accuracy")]
    assert keys == ["round_1_test_accuracy", "round_2_test_accuracy", "round_3_test_accuracy"]
    assert "baseline_accuracy" in rep.traces
    assert rep.accuracy == rep.traces["round_3_test_accuracy"]
    assert params.spec.n_trials == 3


def test_semisup_without_unlabeled_equals_baseline():
    _, rep = run_semisup(small_semisup(labeled_all=True))
    assert rep.traces["round_2_test_accuracy"] == rep.traces["baseline_accuracy"]


def test_semisup_validates_setup():
    s = small_semisup()
    with pytest.raises(ValueError):
        SemiSupSetup(s.features, SplitSpec([], [0], [1]))
    unl = FeatureSet(s.features.features, np.where(np.arange(120) == 0, -1, s.features.label_array()), 3)
    with pytest.raises(ValueError):
        SemiSupSetup(unl, SplitSpec([0], [], [1]))


def imitation_setup(teacher, student, y, **kw):
    ev = np.arange(0, len(y), 5)
    return ImitationSetup(FeatureSet(teacher, y, 5), FeatureSet(student, y, 5), ev, **kw)


def test_imitation_identical_clean_blobs_high_recall():
    x, y = gaussian_blobs(0, n_per_class=60)
    setup = imitation_setup(x, x, y, ems_cfg=EmsConfig(z=5, t=5, k=5, kmeans_restarts=3),
                            train_cfg=TrainConfig(epochs=10, learning_rate=0.05),
                            hidden_dims=(16,), activation="tanh")
    _, rep = run_imitation(setup)
    assert rep.recall_at_1 >= 0.95


def test_imitation_rejects_oversized_config():
    x, y = gaussian_blobs(0, n_per_class=4)
    setup = imitation_setup(x, x, y, ems_cfg=EmsConfig(z=20, t=1, k=0))
    with pytest.raises(ConfigError):
        run_imitation(setup)


def test_student_training_does_not_need_teacher():
    x, y = gaussian_blobs(1, n_per_class=30)
    noisy = x + make_rng(0).normal(size=x.shape)
    setup = imitation_setup(x, noisy, y, ems_cfg=EmsConfig(z=5, t=2, k=3, kmeans_restarts=2),
                            train_cfg=TrainConfig(epochs=2))
    train_idx, ens = imitation_targets(setup)
    # student stage gets only the student view and the pseudo-labels
    res, traces = train_student(setup.student_features, train_idx, ens, setup.eval_indices,
                                setup.ems_cfg, setup.train_cfg)
    _, rep = run_imitation(setup)
    assert traces == rep.traces
    assert set(traces) == {"recall_at_1_before", "recall_at_1_raw_student", "recall_at_1_after",
                           "final_train_loss"}


def test_imitation_shape_mismatch():
    x, y = gaussian_blobs(0, n_per_class=4)
    with pytest.raises(ValueError):
        ImitationSetup(FeatureSet(x, y, 5), FeatureSet(x[:-1], y[:-1], 5), [0])


def test_ensemble_purity_averages_trials():
    truth = [0, 0, 1, 1]
    assert ensemble_purity(np.array([[0, 0], [0, 1], [1, 0], [1, 1]]), truth) == 0.75
