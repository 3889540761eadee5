import json

import numpy as np
import pytest

from sphere_at.checkpoint import load_checkpoint, read_blobs
from sphere_at.cli import VERSION, main
from sphere_at.config import SCHEMA, ConfigError, ExperimentConfig

TINY = """\
seed = 2
dataset = two-moons
data.n_train = 120
data.n_test = 60
arch.hidden = 8
arch.feature_dim = 4
framework = pgd-at
epochs = 2
batch_size = 30
lr = 0.05
attack.eps = 0.05
attack.step = 0.02
attack.steps = 2
eval.steps = 3
"""


# -- config ----------------------------------------------------------------------------

def test_config_defaults_and_round_trip():
    cfg = ExperimentConfig.parse(TINY)
    assert cfg["arch.hidden"] == (8,) and cfg["head.mode"] == "standard" and cfg["lam"] is None
    again = ExperimentConfig.parse(cfg.to_text(VERSION))
    assert again.values == cfg.values
    assert set(cfg.values) == set(SCHEMA)


def test_config_errors_carry_line_numbers():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.parse("seed = 1\nbogus = 3\n")
    assert info.value.line == 2 and info.value.key == "bogus"
    with pytest.raises(ConfigError, match="duplicate"):
        ExperimentConfig.parse("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="key = value"):
        ExperimentConfig.parse("just words\n")
    with pytest.raises(ConfigError, match="epochs"):
        ExperimentConfig.parse("epochs = ten\n")


def test_config_rejects_invalid_combinations():
    with pytest.raises(ConfigError):
        ExperimentConfig.parse(TINY, {"head.mode": "arcface"})
    with pytest.raises(ConfigError):
        ExperimentConfig.parse(TINY, {"attack.steps": "0"})
    with pytest.raises(ConfigError, match="data.train_images"):
        ExperimentConfig.parse(TINY, {"dataset": "idx"})


def test_config_head_margin_defaults():
    assert ExperimentConfig.parse(TINY, {"head.mode": "m-he"}).head().m == 0.1
    assert ExperimentConfig.parse(TINY, {"head.mode": "he", "head.m": "0.35"}).head().m == 0.35


# -- train / attack / eval ------------------------------------------------------------------

@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture
def trained(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["train", str(cfg_file), "--out", str(out), "--set", "checkpoint_every=1"]) == 0
    return out


def test_train_writes_artifacts(trained):
    assert {p.name for p in trained.iterdir()} >= {"VERSION", "config.resolved", "history.csv", "model.ckpt",
                                                     "epoch0001.ckpt", "epoch0002.ckpt"}
    assert (trained / "VERSION").read_text().strip() == VERSION
    assert (trained / "config.resolved").read_text().startswith(f"# {VERSION}\n")
    lines = (trained / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,clean_acc,robust_acc,train_loss,wall_ms" and len(lines) == 3
    _, head, header = load_checkpoint(trained / "model.ckpt")
    assert header["cfg.seed"] == "2" and header["version"] == VERSION and head.mode == "standard"


def test_train_is_byte_reproducible(tmp_path, cfg_file, trained):
    again = tmp_path / "again"
    assert main(["train", str(cfg_file), "--out", str(again), "--set", "checkpoint_every=1"]) == 0
    for name in ("history.csv", "model.ckpt", "epoch0001.ckpt"):
        assert (again / name).read_bytes() == (trained / name).read_bytes()


def test_train_usage_errors(tmp_path, cfg_file, capsys):
    assert main(["train", str(cfg_file), "--set", "nonsense=1"]) == 2
    assert main(["train", str(cfg_file), "--set", "noequals"]) == 2
    assert main(["train", str(tmp_path / "missing.cfg")]) == 2
    assert "error:" in capsys.readouterr().err


def test_train_numeric_failure_exit_code(tmp_path, cfg_file):
    out = tmp_path / "boom"
    with np.errstate(all="ignore"):
        code = main(["train", str(cfg_file), "--out", str(out), "--set", "lr=1e300", "--set", "momentum=0"])
    assert code == 3
    assert (out / "last_good.ckpt").is_file()


def test_attack_zero_budget_equals_clean_eval(tmp_path, trained, capsys):
    ckpt = str(trained / "model.ckpt")
    assert main(["eval", ckpt, "--out", str(tmp_path / "ev")]) == 0
    clean = json.loads((tmp_path / "ev" / "eval.json").read_text())["accuracy"]
    assert main(["attack", ckpt, "--eps", "0", "--step", "0", "--out", str(tmp_path / "at")]) == 0
    result = json.loads((tmp_path / "at" / "attack.json").read_text())
    assert result["robust_acc"] == clean and result["n"] == 60


@pytest.mark.parametrize("attack", ["fgsm", "bim", "pgd", "mim", "nes", "spsa"])
def test_every_attack_runs(tmp_path, trained, attack):
    out = tmp_path / attack
    args = ["attack", str(trained / "model.ckpt"), "--attack", attack, "--eps", "0.05", "--step", "0.02",
            "--steps", "2", "--q", "4", "--limit", "10", "--dump-adv", "--out", str(out)]
    assert main(args) == 0
    header, tensors = read_blobs(out / "adversarial.ckpt")
    assert header["kind"] == "adv-batch" and tensors["inputs"].shape == (10, 2)
    assert np.abs(tensors["inputs"] - np.clip(tensors["inputs"], 0, 1)).max() == 0


def test_attack_usage_errors(trained):
    ckpt = str(trained / "model.ckpt")
    assert main(["attack", ckpt, "--steps", "0"]) == 2
    assert main(["attack", ckpt, "--adaptive"]) == 2


def test_eval_with_corruption(tmp_path, trained, capsys):
    assert main(["eval", str(trained / "model.ckpt"), "--corruption", "brightness", "--severity", "3"]) == 0
    assert "brightness-3 accuracy=" in capsys.readouterr().out
    assert main(["eval", str(trained / "model.ckpt"), "--corruption", "brightness", "--severity", "9"]) == 2


# -- verify / report ------------------------------------------------------------------------

def test_verify_selector(tmp_path, capsys):
    assert main(["verify", "eq16", "--trials", "5", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "verify-eq16.json").read_text())
    assert data["results"][0]["passed"] and data["results"][0]["value"] < 1e-10
    assert "PASS eq16" in capsys.readouterr().out
    assert main(["verify", "eq17"]) == 2


def test_report_table(tmp_path, trained, capsys):
    assert main(["report", str(trained), "--out", str(tmp_path / "rep")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["run", "framework", "he", "clean_acc", "robust_acc", "attack", "eps", "steps"]
    assert out[1].split()[:3] == ["run", "pgd-at", "standard"]
    assert (tmp_path / "rep" / "report.csv").read_text().startswith("run,framework,he,")
    assert main(["report"]) == 2
    assert main(["report", str(tmp_path)]) == 2
