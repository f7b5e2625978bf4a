import json
import subprocess
import sys

import numpy as np
import pytest

from manifoldnet.cli import DEFAULTS, main, parse_config, read_config_file
from manifoldnet.data import FeatureSet, load_pseudo, save_features
from manifoldnet.errors import ConfigError
from manifoldnet.net import load_model

from .conftest import gaussian_blobs

FAST = ["--ems.t", "3", "--ems.z", "4", "--ems.k", "3", "--ems.kmeans_restarts", "2",
        "--train.epochs", "2", "--net.hidden_dims", "8"]


@pytest.fixture
def feats(tmp_path):
    x, y = gaussian_blobs(0, n_per_class=30, n_classes=3, dim=4)
    p = tmp_path / "f.bin"
    save_features(FeatureSet(x, y, 3), p)
    return p


def test_empty_file_gives_paper_defaults(tmp_path, feats):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("")
    cfg = parse_config("segment", cfg_file, {"paths.input": str(feats), "paths.out": "o"}, env={})
    assert (cfg.ems.z, cfg.ems.t, cfg.ems.k) == (30, 90, 9)
    assert cfg.train.lambda_s == cfg.train.lambda_m == 0.0005


def test_cli_overrides_file(tmp_path, feats):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("# comment\nems.z = 5\nrun.seed = 3\n")
    cfg = parse_config("segment", cfg_file, {"ems.z": "7", "paths.input": str(feats),
                                              "paths.out": "o"}, env={})
    assert cfg.ems.z == 7 and cfg.seed == 3


def test_seed_precedence(tmp_path, feats):
    base = {"paths.input": str(feats), "paths.out": "o"}
    assert parse_config("segment", None, base, env={"MANIFOLDNET_SEED": "9"}).seed == 9
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("run.seed = 4\n")
    assert parse_config("segment", cfg_file, base, env={"MANIFOLDNET_SEED": "9"}).seed == 4
    assert parse_config("segment", cfg_file, {**base, "run.seed": "5"},
                        env={"MANIFOLDNET_SEED": "9"}).seed == 5
    assert parse_config("segment", None, base, env={"MANIFOLDNET_SEED": "9"}).ems.master_seed == 9


@pytest.mark.parametrize("over,key", [
    ({"ems.k": "-1"}, "ems.k"),
    ({"ems.z": "abc"}, "ems.z"),
    ({"ems.nope": "1"}, "ems.nope"),
    ({"train.learning_rate": "0"}, "train.learning_rate"),
    ({"net.activation": "gelu"}, "net.activation"),
    ({"run.seed": "-1"}, "run.seed"),
    ({"run.normalize": "maybe"}, "run.normalize"),
])
def test_errors_name_key(feats, over, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config("segment", None, {"paths.input": str(feats), "paths.out": "o", **over}, env={})


def test_config_file_errors(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("ems.z = 3\nbogus.key = 1\n")
    with pytest.raises(ConfigError, match="line 2.*bogus.key"):
        read_config_file(p)
    p.write_text("no equals sign\n")
    with pytest.raises(ConfigError, match="line 1"):
        read_config_file(p)


def test_missing_input_is_named(tmp_path, capsys):
    rc = main(["segment", "--input", str(tmp_path / "absent.bin"), "--out", str(tmp_path / "p")])
    assert rc != 0
    assert "absent.bin" in capsys.readouterr().err


def test_echo_reproduces_run(tmp_path, feats, capsys):
    out = tmp_path / "a" / "p.mfpl"
    assert main(["segment", "--input", str(feats), "--out", str(out), "--seed", "7", *FAST]) == 0
    echo = out.with_name("p.mfpl.config.txt")
    assert set(read_config_file(echo)) == set(DEFAULTS)
    first = out.read_bytes()
    out.unlink()
    assert main(["segment", "--config", str(echo)]) == 0
    assert out.read_bytes() == first
    assert "workers" not in echo.read_text()


def test_segment_outputs(tmp_path, feats, capsys):
    out = tmp_path / "p.mfpl"
    assert main(["segment", "--input", str(feats), "--out", str(out), *FAST]) == 0
    ens = load_pseudo(out)
    assert ens.labels.shape == (90, 3) and ens.n_pseudo_classes == 4
    report = (tmp_path / "p.mfpl.report.txt").read_text()
    assert report.startswith("purity=") and report == capsys.readouterr().out
    assert json.loads((tmp_path / "p.mfpl.summary.json").read_text())["purity"] > 0.5


def test_train_evaluate_pipeline(tmp_path, feats):
    pseudo, model, ev = tmp_path / "p.mfpl", tmp_path / "m.mfmd", tmp_path / "ev.txt"
    assert main(["segment", "--input", str(feats), "--out", str(pseudo), *FAST]) == 0
    assert main(["train", "--input", str(feats), "--pseudo", str(pseudo), "--out", str(model),
                 *FAST]) == 0
    spec = load_model(model).spec
    assert (spec.n_classes, spec.n_trials, spec.n_pseudo_classes) == (3, 3, 4)
    assert main(["evaluate", "--input", str(feats), "--model", str(model), "--out", str(ev),
                 "--pseudo", str(pseudo)]) == 0
    keys = [line.split("=")[0] for line in ev.read_text().splitlines()]
    assert keys[:3] == ["accuracy", "recall_at_1", "purity"]


def test_semisup_and_imitate_commands(tmp_path, feats):
    out = tmp_path / "s.mfmd"
    assert main(["semisup", "--input", str(feats), "--out", str(out), "--run.labels_per_class", "3",
                 "--run.refine_rounds", "2", *FAST]) == 0
    text = (tmp_path / "s.mfmd.report.txt").read_text()
    assert "baseline_accuracy=" in text and "round_2_test_accuracy=" in text
    out = tmp_path / "i.mfmd"
    assert main(["imitate", "--teacher", str(feats), "--student", str(feats), "--out", str(out),
                 "--normalize", *FAST]) == 0
    assert "recall_at_1_after=" in (tmp_path / "i.mfmd.report.txt").read_text()


def test_bad_override_syntax(feats, capsys):
    assert main(["segment", "--input", str(feats), "--out", "x", "stray"]) != 0
    assert "stray" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "manifoldnet", "train", "--out", str(tmp_path / "m")],
                          capture_output=True, text=True)
    assert proc.returncode != 0
    assert "paths.input" in proc.stderr and "Traceback" not in proc.stderr


def test_divergent_numbers_are_reported(tmp_path, feats, capsys):
    x = np.full((20, 2), 1e3)
    p = tmp_path / "big.bin"
    save_features(FeatureSet(x, np.arange(20) % 2, 2), p)
    rc = main(["train", "--input", str(p), "--out", str(tmp_path / "m"), "--train.learning_rate", "1e6",
               "--train.epochs", "20"])
    assert rc != 0 and "overflow float32" in capsys.readouterr().err
    assert not (tmp_path / "m").exists()
    rc = main(["train", "--input", str(p), "--out", str(tmp_path / "m"), "--train.learning_rate",
               "1e200", "--train.epochs", "20"])
    assert rc != 0 and "non-finite loss at epoch" in capsys.readouterr().err
