import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from hpcfnet.checkpoint import save_checkpoint
from hpcfnet.cli import main
from hpcfnet.metrics import parse_report
from hpcfnet.model import HPCFNet, ModelConfig


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--seed", "7", "--count", "16", "--size", "32x32", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    save_checkpoint(path, HPCFNet(ModelConfig(width_scale=1 / 16, input_size=(32, 32), seed=2)))
    return path


def train_args(dataset, out, *extra):
    return ["train", "--data", str(dataset), "--out", str(out), "--width-scale", "0.0625", *extra]


class TestSynth:
    def test_pairs_and_manifest(self, dataset):
        lines = (dataset / "manifest.tsv").read_text().splitlines()
        assert lines[0] == "# hpcfnet-manifest v1 seed=7"
        assert len(lines) == 17
        assert len(list(dataset.glob("*_mask.png"))) == 16

    def test_repeat_identical(self, dataset, tmp_path):
        assert main(["synth", "--seed", "7", "--count", "16", "--size", "32x32", "--out", str(tmp_path)]) == 0
        for f in dataset.iterdir():
            assert f.read_bytes() == (tmp_path / f.name).read_bytes()

    @pytest.mark.parametrize("size", ["60x60", "64", "0x32"])
    def test_bad_size(self, tmp_path, size, capsys):
        assert main(["synth", "--size", size, "--out", str(tmp_path)]) == 2
        assert "--size" in capsys.readouterr().err

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HPCFNET_OUT", str(tmp_path))
        assert main(["synth", "--count", "1", "--size", "16x16"]) == 0
        assert (tmp_path / "synth" / "manifest.tsv").is_file()


class TestTrain:
    def test_one_epoch(self, dataset, tmp_path, capsys):
        assert main(train_args(dataset, tmp_path, "--epochs", "1")) == 0
        out = capsys.readouterr().out
        config = json.loads(out.splitlines()[0].split(" ", 1)[1])
        assert (config["batch_size"], config["lr"], config["momentum"], config["weight_decay"]) == \
            (8, 0.01, 0.95, 1.25e-4)
        log = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert len(log) == 1 and json.loads(log[0])["steps"] == 2
        assert (tmp_path / "final.ckpt").is_file()

    def test_flags_override_config(self, dataset, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"epochs": 3, "lr": 0.005, "eval_every": 0}))
        assert main(train_args(dataset, tmp_path / "run", "--config", str(cfg), "--epochs", "1")) == 0
        saved = json.loads((tmp_path / "run" / "run_config.json").read_text())
        assert saved["epochs"] == 1 and saved["lr"] == 0.005
        assert len((tmp_path / "run" / "train_log.jsonl").read_text().splitlines()) == 1

    def test_unknown_config_key(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
        assert main(train_args(dataset, tmp_path, "--config", str(cfg))) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_data(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--epochs", "1"]) == 2
        assert "--data" in capsys.readouterr().err

    def test_nonexistent_data(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope"), "--epochs", "1"]) == 2
        assert "--data" in capsys.readouterr().err

    @pytest.mark.parametrize("bad", [{"momentum": 1.5}, {"batch_size": 0}, {"arch": "resnet"},
                                     {"dtype": "float16"}, {"lr": -0.1}])
    def test_invalid_value(self, dataset, tmp_path, capsys, bad):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(bad))
        assert main(train_args(dataset, tmp_path / "r", "--config", str(cfg), "--epochs", "1")) == 2
        assert "invalid configuration" in capsys.readouterr().err

    def test_checkpoint_write_failure(self, dataset, tmp_path, capsys):
        (tmp_path / "final.ckpt").mkdir()
        assert main(train_args(dataset, tmp_path, "--epochs", "1", "--eval-every", "0")) == 1
        assert "final.ckpt" in capsys.readouterr().err


class TestEval:
    def test_report_round_trip(self, dataset, checkpoint, tmp_path, capsys):
        report = tmp_path / "report.jsonl"
        assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset), "--split", "train",
                     "--out", str(report)]) == 0
        stdout_agg = json.loads(capsys.readouterr().out.splitlines()[-1])
        assert parse_report(report.read_text()) == stdout_agg
        assert len(report.read_text().splitlines()) == 17

    def test_empty_split(self, dataset, checkpoint, capsys):
        assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset), "--split", "val"]) == 2
        assert "empty" in capsys.readouterr().err

    def test_bad_checkpoint(self, dataset, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["eval", "--checkpoint", str(bad), "--data", str(dataset), "--split", "train"]) == 2


class TestPredict:
    def test_png_contract(self, dataset, checkpoint, tmp_path):
        out = tmp_path / "pred.png"
        assert main(["predict", "--checkpoint", str(checkpoint), "--t0", str(dataset / "pair00000_t0.png"),
                     "--t1", str(dataset / "pair00000_t1.png"), "--out", str(out)]) == 0
        with Image.open(out) as im:
            assert im.mode == "L" and im.size == (32, 32)
            assert set(np.unique(np.asarray(im)).tolist()) <= {0, 255}

    def test_size_mismatch(self, checkpoint, tmp_path, capsys):
        Image.new("RGB", (32, 32)).save(tmp_path / "a.png")
        Image.new("RGB", (64, 32)).save(tmp_path / "b.png")
        assert main(["predict", "--checkpoint", str(checkpoint), "--t0", str(tmp_path / "a.png"),
                     "--t1", str(tmp_path / "b.png"), "--out", str(tmp_path / "p.png")]) == 2
        assert "--t1" in capsys.readouterr().err

    def test_indivisible_size(self, checkpoint, tmp_path):
        for name in ("a.png", "b.png"):
            Image.new("RGB", (40, 40)).save(tmp_path / name)
        assert main(["predict", "--checkpoint", str(checkpoint), "--t0", str(tmp_path / "a.png"),
                     "--t1", str(tmp_path / "b.png"), "--out", str(tmp_path / "p.png")]) == 2

    def test_missing_input(self, checkpoint, tmp_path):
        assert main(["predict", "--checkpoint", str(checkpoint), "--t0", str(tmp_path / "x.png"),
                     "--t1", str(tmp_path / "y.png")]) == 2


class TestGradcheck:
    def test_impossible_tolerance(self, capsys):
        assert main(["gradcheck", "--ops-only", "--tol", "1e-12"]) != 0
        out = capsys.readouterr().out
        fail = next(line for line in out.splitlines() if line.startswith("FAIL"))
        assert "worst_rel=" in fail and "[" in fail

    def test_ops_pass(self, capsys):
        assert main(["gradcheck", "--ops-only"]) == 0
        assert "FAIL" not in capsys.readouterr().out


def test_usage_error_exit_code():
    proc = subprocess.run([sys.executable, "-m", "hpcfnet", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hpcfnet", "synth", "--count", "1", "--size", "16x16",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "manifest.tsv").is_file()
