"""Ensemble manifold segmentation and two-stream multi-task training.

Unlabeled features are partitioned many times over into pseudo-classes;
a network with one shared backbone learns every partition as a separate
classification task, optionally alongside a supervised task.
"""
from .data import FeatureSet, PseudoLabelEnsemble, SplitSpec
from .ems import EmsConfig, run_ems
from .errors import ConfigError, DivergenceError, FormatError, ManifoldNetError
from .kernels import BACKEND
from .net import NetworkParams, NetworkSpec, TrainConfig, embed, forward, init_params, train
from .tasks import MetricsReport, recall_at_1, run_imitation, run_semisup

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DivergenceError",
    "EmsConfig",
    "FeatureSet",
    "FormatError",
    "ManifoldNetError",
    "MetricsReport",
    "NetworkParams",
    "NetworkSpec",
    "PseudoLabelEnsemble",
    "SplitSpec",
    "TrainConfig",
    "embed",
    "forward",
    "init_params",
    "recall_at_1",
    "run_ems",
    "run_imitation",
    "run_semisup",
    "train",
]
