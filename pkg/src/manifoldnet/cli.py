"""Command-line entry point.

Configuration is layered: built-in defaults, then ``MANIFOLDNET_SEED`` (seed
only), then the ``--config`` file, then command-line flags. The config file
holds ``section.key = value`` lines; ``#`` starts a comment. Any key can be
overridden as ``--section.key value``.

Every command writes its main output (``--out``) plus three sidecars:
``<out>.report.txt`` (``key=value`` metrics), ``<out>.summary.json`` and
``<out>.config.txt`` (the effective configuration, itself a valid config
file). ``evaluate`` writes its report to ``--out`` directly.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    FeatureSet, ensure_parent, load_features, load_pseudo, load_split, make_split, save_pseudo,
)
from .ems import EmsConfig, run_ems
from .errors import ConfigError, ManifoldNetError
from .neighbors import make_rng, normalize_l2
from .net import NetworkSpec, TrainConfig, embed, init_params, load_model, save_model, train
from .tasks import (
    ImitationSetup, MetricsReport, SemiSupSetup, accuracy, ensemble_purity, recall_at_1,
    run_imitation, run_semisup,
)

COMMANDS = ("segment", "train", "evaluate", "imitate", "semisup")
SEED_ENV = "MANIFOLDNET_SEED"

DEFAULTS: dict[str, object] = {
    "ems.z": 30,
    "ems.t": 90,
    "ems.k": 9,
    "ems.lr_reg": 1e-3,
    "ems.lr_iters": 500,
    "ems.kmeans_max_iter": 100,
    "ems.kmeans_tol": 1e-6,
    "ems.kmeans_restarts": 10,
    "train.lambda_s": 0.0005,
    "train.lambda_m": 0.0005,
    "train.lambda": 1.0,
    "train.lambda_mode": "auto_balance",
    "train.learning_rate": 0.01,
    "train.epochs": 30,
    "train.batch_size": 64,
    "net.hidden_dims": (64,),
    "net.activation": "relu",
    "run.seed": 0,
    "run.normalize": False,
    "run.refine_rounds": 3,
    "run.labels_per_class": 30,
    "run.test_fraction": 0.2,
    "run.eval_fraction": 0.2,
    "paths.input": "",
    "paths.out": "",
    "paths.pseudo": "",
    "paths.model": "",
    "paths.split": "",
    "paths.teacher": "",
    "paths.student": "",
}

REQUIRED_INPUTS = {
    "segment": ("paths.input",),
    "train": ("paths.input",),
    "evaluate": ("paths.input", "paths.model"),
    "imitate": ("paths.teacher", "paths.student"),
    "semisup": ("paths.input",),
}


def _parse_value(key, text):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse value {text!r}") from None


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_config_file(path) -> dict[str, str]:
    out = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {line_no}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{path}: line {line_no}: unknown key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    command: str
    values: dict
    ems: EmsConfig
    train: TrainConfig
    workers: int = 1
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    def echo(self) -> str:
        """Effective configuration as a config file (worker count excluded: it never changes results)."""
        lines = [f"# manifoldnet {self.command}"]
        lines += [f"{k} = {_format_value(v)}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"


def parse_config(command: str, config_path=None, overrides: dict[str, str] | None = None,
                 env=None, workers: int | None = None) -> RunConfig:
    """Resolve the effective configuration for ``command``."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    env = os.environ if env is None else env
    values = dict(DEFAULTS)
    sources = {k: "default" for k in values}
    if env.get(SEED_ENV, "").strip():
        values["run.seed"] = _parse_value("run.seed", env[SEED_ENV])
        sources["run.seed"] = "env"
    if config_path:
        if not Path(config_path).is_file():
            raise ConfigError(f"config file not found: {config_path}")
        for k, v in read_config_file(config_path).items():
            values[k] = _parse_value(k, v)
            sources[k] = "file"
    for k, v in (overrides or {}).items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _parse_value(k, v)
        sources[k] = "cli"

    seed = values["run.seed"]
    if not 0 <= seed < 2**64:
        raise ConfigError(f"run.seed must be an unsigned 64-bit integer, got {seed}")
    if values["run.refine_rounds"] < 1:
        raise ConfigError("run.refine_rounds must be >= 1")
    if values["run.labels_per_class"] < 1:
        raise ConfigError("run.labels_per_class must be >= 1")
    for key in ("run.test_fraction", "run.eval_fraction"):
        if not 0.0 < values[key] < 1.0:
            raise ConfigError(f"{key} must lie in (0, 1)")
    ems = EmsConfig(
        z=values["ems.z"], t=values["ems.t"], k=values["ems.k"], lr_reg=values["ems.lr_reg"],
        lr_iters=values["ems.lr_iters"], master_seed=seed,
        kmeans_max_iter=values["ems.kmeans_max_iter"], kmeans_tol=values["ems.kmeans_tol"],
        kmeans_restarts=values["ems.kmeans_restarts"],
    )
    if ems.kmeans_max_iter < 1 or not ems.kmeans_tol >= 0:
        raise ConfigError("ems.kmeans_max_iter must be >= 1 and ems.kmeans_tol >= 0")
    tcfg = TrainConfig(
        lambda_s=values["train.lambda_s"], lambda_m=values["train.lambda_m"],
        lam=values["train.lambda"], lambda_mode=values["train.lambda_mode"],
        learning_rate=values["train.learning_rate"], epochs=values["train.epochs"],
        batch_size=values["train.batch_size"], seed=seed,
    )
    NetworkSpec(1, values["net.hidden_dims"], values["net.activation"])  # validates net.*

    for key in REQUIRED_INPUTS[command]:
        if not values[key]:
            raise ConfigError(f"{key} is required for '{command}'")
    for key in ("paths.input", "paths.pseudo", "paths.model", "paths.split", "paths.teacher",
                "paths.student"):
        if command == "train" and key == "paths.model":
            continue
        path = values[key]
        if path and not Path(path).is_file() and key in _inputs_for(command):
            raise ConfigError(f"{key}: input file not found: {path}")
    if not values["paths.out"]:
        raise ConfigError(f"paths.out is required for '{command}'")
    parent = _existing_parent(Path(values["paths.out"]).resolve().parent)
    if not os.access(parent, os.W_OK):
        raise ConfigError(f"paths.out: directory not writable: {parent}")
    workers = workers if workers is not None else (os.cpu_count() or 1)
    return RunConfig(command, values, ems, tcfg, max(1, int(workers)), sources)


def _existing_parent(path: Path) -> Path:
    while not path.exists():
        path = path.parent
    return path


def _inputs_for(command):
    extra = {
        "segment": (),
        "train": ("paths.pseudo", "paths.split"),
        "evaluate": ("paths.pseudo", "paths.split"),
        "imitate": ("paths.split",),
        "semisup": ("paths.split",),
    }[command]
    return REQUIRED_INPUTS[command] + extra


def _features(cfg: RunConfig, key: str) -> FeatureSet:
    fs = load_features(cfg[key])
    return normalize_l2(fs) if cfg["run.normalize"] else fs


def _write_outputs(cfg: RunConfig, report: MetricsReport, report_path=None):
    out = cfg["paths.out"]
    report_path = report_path or f"{out}.report.txt"
    text = report.to_lines()
    Path(report_path).write_text(text, encoding="utf-8")
    Path(f"{out}.summary.json").write_text(report.to_json(), encoding="utf-8")
    Path(f"{out}.config.txt").write_text(cfg.echo(), encoding="utf-8")
    sys.stdout.write(text)


def cmd_segment(cfg: RunConfig):
    fs = _features(cfg, "paths.input")
    ens = run_ems(fs.features, cfg.ems, cfg.workers)
    save_pseudo(ens, cfg["paths.out"])
    traces = {"n_samples": ens.n_samples, "n_trials": ens.n_trials,
              "n_pseudo_classes": ens.n_pseudo_classes}
    pur = None
    if fs.has_labels and fs.labeled_mask.all():
        pur = ensemble_purity(ens.labels, fs.label_array())
    _write_outputs(cfg, MetricsReport(purity=pur, traces=traces))


def _split_or_none(cfg):
    return load_split(cfg["paths.split"]) if cfg["paths.split"] else None


def cmd_train(cfg: RunConfig):
    fs = _features(cfg, "paths.input")
    split = _split_or_none(cfg)
    labels = fs.label_array()
    if split is not None:
        split.check(fs.n_samples)
        lab_idx = split.labeled
        if (labels[lab_idx] < 0).any():
            raise ValueError("split lists unlabeled samples under [labeled]")
    else:
        lab_idx = np.flatnonzero(fs.labeled_mask)
    labeled = (fs.features[lab_idx], labels[lab_idx]) if lab_idx.size else None
    pseudo = None
    t = z = 0
    if cfg["paths.pseudo"]:
        ens = load_pseudo(cfg["paths.pseudo"])
        if ens.n_samples != fs.n_samples:
            raise ValueError(f"pseudo-labels cover {ens.n_samples} samples, features have {fs.n_samples}")
        rows = split.unlabeled if split is not None else np.arange(fs.n_samples)
        pseudo = (fs.features[rows], ens.labels[rows])
        t, z = ens.n_trials, ens.n_pseudo_classes
    c = fs.n_classes if labeled is not None else 0
    spec = NetworkSpec(fs.dim, cfg["net.hidden_dims"], cfg["net.activation"], c, t, z)
    res = train(init_params(spec, cfg.seed), cfg.train, labeled, pseudo)
    save_model(res.params, cfg["paths.out"])
    traces = {"epochs": len(res.losses), "final_loss": res.losses[-1],
              "final_supervised_loss": res.supervised_losses[-1],
              "final_manifold_loss": res.manifold_losses[-1], "lambda": res.lam}
    acc = None
    if labeled is not None:
        acc = accuracy(res.params, *labeled)
        traces["train_accuracy"] = acc
    _write_outputs(cfg, MetricsReport(traces=traces))


def cmd_evaluate(cfg: RunConfig):
    fs = _features(cfg, "paths.input")
    params = load_model(cfg["paths.model"])
    split = _split_or_none(cfg)
    rows = split.test if split is not None else np.arange(fs.n_samples)
    labels = fs.label_array()[rows]
    keep = labels >= 0
    x = fs.features[rows][keep]
    y = labels[keep]
    acc = rec = pur = None
    if y.size:
        if params.spec.n_classes:
            acc = accuracy(params, x, y)
        if y.size > 1:
            rec = recall_at_1(embed(params, x), None, y)
    if cfg["paths.pseudo"] and fs.has_labels and fs.labeled_mask.all():
        pur = ensemble_purity(load_pseudo(cfg["paths.pseudo"]).labels, fs.label_array())
    report = MetricsReport(accuracy=acc, recall_at_1=rec, purity=pur,
                           traces={"n_evaluated": int(y.size)})
    _write_outputs(cfg, report, report_path=cfg["paths.out"])


def cmd_imitate(cfg: RunConfig):
    teacher = _features(cfg, "paths.teacher")
    student = _features(cfg, "paths.student")
    split = _split_or_none(cfg)
    if split is not None:
        split.check(student.n_samples)
        eval_idx = split.test
    else:
        n = student.n_samples
        perm = make_rng(cfg.seed, 7).permutation(n)
        eval_idx = np.sort(perm[: max(2, int(round(cfg["run.eval_fraction"] * n)))])
    setup = ImitationSetup(teacher, student, eval_idx, cfg.ems, cfg.train,
                           cfg["net.hidden_dims"], cfg["net.activation"], False, cfg.workers)
    params, report = run_imitation(setup)
    save_model(params, cfg["paths.out"])
    _write_outputs(cfg, report)


def cmd_semisup(cfg: RunConfig):
    fs = _features(cfg, "paths.input")
    split = _split_or_none(cfg)
    if split is None:
        split = make_split(fs, cfg["run.labels_per_class"], cfg["run.test_fraction"],
                           make_rng(cfg.seed, 8))
    setup = SemiSupSetup(fs, split, cfg.ems, cfg.train, cfg["run.refine_rounds"],
                         cfg["net.hidden_dims"], cfg["net.activation"], False, cfg.workers)
    params, report = run_semisup(setup)
    save_model(params, cfg["paths.out"])
    _write_outputs(cfg, report)


HANDLERS = {
    "segment": cmd_segment,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "imitate": cmd_imitate,
    "semisup": cmd_semisup,
}

_FLAG_KEYS = {
    "seed": "run.seed",
    "input": "paths.input",
    "out": "paths.out",
    "pseudo": "paths.pseudo",
    "model": "paths.model",
    "split": "paths.split",
    "teacher": "paths.teacher",
    "student": "paths.student",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file of 'section.key = value' lines")
    common.add_argument("--seed", help="unsigned 64-bit seed (env MANIFOLDNET_SEED is the fallback)")
    common.add_argument("--workers", type=int, default=None,
                        help="cap on internal parallelism; never changes results")
    common.add_argument("--normalize", action="store_true", default=None,
                        help="L2-normalize input features before use")
    for name in ("input", "out", "pseudo", "model", "split", "teacher", "student"):
        common.add_argument(f"--{name}")

    parser = argparse.ArgumentParser(
        prog="manifoldnet",
        description="Ensemble manifold segmentation and two-stream training.",
        epilog="Any config key can be overridden with --section.key VALUE.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "segment": "pseudo-label ensemble of a feature file",
        "train": "train a network on labels and/or pseudo-labels",
        "evaluate": "accuracy / recall@1 / purity of a trained model",
        "imitate": "teacher-manifold imitation by a student network",
        "semisup": "iterated semi-supervised training with a supervised baseline",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _split_overrides(rest):
    out = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"{key}: missing value")
            value = rest[i + 1]
            i += 2
        out[key] = value
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(rest)
        for flag, key in _FLAG_KEYS.items():
            v = getattr(args, flag)
            if v is not None:
                overrides[key] = v
        if args.normalize:
            overrides["run.normalize"] = "true"
        cfg = parse_config(args.command, args.config, overrides, workers=args.workers)
        ensure_parent(cfg["paths.out"])
        HANDLERS[args.command](cfg)
    except (ManifoldNetError, OSError, ValueError) as exc:
        print(f"manifoldnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
