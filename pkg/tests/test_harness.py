"""Experiment orchestration and the command-line interface."""

import json
import os

import numpy as np
import pytest

from evidseg import cli
from evidseg.backbone import load_checkpoint, predict
from evidseg.harness import (
    ExperimentConfig,
    cmd_eval,
    cmd_generate,
    cmd_selfcheck,
    cmd_sweep,
    cmd_train,
    load_experiment_config,
    parse_config_text,
)
from evidseg.metrics import evaluate
from evidseg.volio import read_volume
from evidseg.volume import LabelVolume, Volume, znorm

_SMALL_CFG = """
# minimal fast configuration
phantom.dims = 16 16 16
phantom.seed = 7
phantom.edema_radius_range = 3 5
n_train = 2
n_val = 1
n_test = 2
train.epochs = 2
train.batch_size = 2
train.seed = 1
noise_levels = 0 0.5
heads = evidential softmax
"""


def _write_cfg(tmp_path, out_dir, extra: str = "") -> str:
    path = str(tmp_path / "exp.cfg")
    with open(path, "w") as f:
        f.write(_SMALL_CFG + f"out = {out_dir}\n" + extra)
    return path


@pytest.fixture()
def small_cfg(tmp_path):
    path = _write_cfg(tmp_path, str(tmp_path / "run"))
    return load_experiment_config(path)


class TestConfigParsing:
    def test_comments_blanks_and_values(self):
        raw = parse_config_text("a = 1  # trailing\n\n# full line\n b.c = x y \n")
        assert raw == {"a": "1", "b.c": "x y"}

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_config_text("a = 1\na = 2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_config_text("just some words\n")

    def test_full_round_trip(self, tmp_path):
        path = _write_cfg(tmp_path, "outdir", extra="loss.lambda_p = 0.3\ntrain.poly_lr = true\n")
        cfg = load_experiment_config(path)
        assert cfg.phantom.dims == (16, 16, 16)
        assert cfg.phantom.seed == 7
        assert cfg.n_train == 2 and cfg.n_val == 1 and cfg.n_test == 2
        assert cfg.noise_levels == (0.0, 0.5)
        assert cfg.heads == ("evidential", "softmax")
        assert cfg.out == "outdir"
        assert cfg.train.epochs == 2 and cfg.train.poly_lr is True
        assert cfg.train.loss.lambda_p == 0.3

    def test_unknown_key_rejected(self, tmp_path):
        path = str(tmp_path / "bad.cfg")
        open(path, "w").write("bogus = 1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_experiment_config(path)

    def test_unknown_section_key_rejected(self, tmp_path):
        path = str(tmp_path / "bad.cfg")
        open(path, "w").write("phantom.bogus = 1\n")
        with pytest.raises(ValueError, match="phantom.bogus"):
            load_experiment_config(path)

    def test_bad_value_type_reported_with_key(self, tmp_path):
        path = str(tmp_path / "bad.cfg")
        open(path, "w").write("train.epochs = many\n")
        with pytest.raises(ValueError, match="train.epochs"):
            load_experiment_config(path)

    def test_validation_noise_levels(self):
        with pytest.raises(ValueError, match="ascending"):
            ExperimentConfig(noise_levels=(1.0, 0.5))
        with pytest.raises(ValueError, match=">= 0"):
            ExperimentConfig(noise_levels=(-1.0, 0.5))

    def test_validation_heads(self):
        with pytest.raises(ValueError, match="unknown head"):
            ExperimentConfig(heads=("evidential", "other"))


class TestGenerate:
    def test_writes_samples_and_manifest(self, small_cfg):
        manifest = cmd_generate(small_cfg)
        ddir = os.path.join(small_cfg.out, "dataset")
        files = sorted(os.listdir(ddir))
        assert "manifest.json" in files
        assert len([f for f in files if f.endswith(".evol")]) == 2 * 5
        assert manifest["splits"] == {"train": 2, "val": 1, "test": 2}
        splits = [e["split"] for e in manifest["samples"]]
        assert splits == ["train", "train", "val", "test", "test"]
        seeds = [e["seed"] for e in manifest["samples"]]
        assert seeds == [7, 8, 9, 10, 11]

    def test_sample_files_readable(self, small_cfg):
        cmd_generate(small_cfg)
        ddir = os.path.join(small_cfg.out, "dataset")
        img = read_volume(os.path.join(ddir, "sample_000_image.evol"))
        lab = read_volume(os.path.join(ddir, "sample_000_labels.evol"))
        assert isinstance(img, Volume) and img.channels == 4
        assert isinstance(lab, LabelVolume)

    def test_manifest_bytes_deterministic(self, small_cfg, tmp_path):
        cmd_generate(small_cfg)
        first = open(os.path.join(small_cfg.out, "dataset", "manifest.json"), "rb").read()
        cmd_generate(small_cfg)
        second = open(os.path.join(small_cfg.out, "dataset", "manifest.json"), "rb").read()
        assert first == second


class TestTrainEvalSweep:
    def test_train_writes_checkpoint_and_log(self, small_cfg):
        cmd_generate(small_cfg)
        path = cmd_train(small_cfg, "evidential")
        assert os.path.exists(path)
        ckpt = load_checkpoint(path)
        assert ckpt.head == "evidential" and ckpt.epoch == 2
        log = open(os.path.join(small_cfg.out, "train_log_evidential.csv")).read()
        lines = log.strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_dice_wt"
        assert len(lines) == 1 + small_cfg.train.epochs

    def test_eval_rows_and_summary(self, small_cfg):
        cmd_generate(small_cfg)
        cmd_train(small_cfg, "evidential")
        rows = cmd_eval(small_cfg, "evidential", 0.5)
        assert len(rows) == small_cfg.n_test
        assert [r["sample"] for r in rows] == [3, 4]
        summary = json.load(
            open(os.path.join(small_cfg.out, "eval_evidential_sigma0.5_summary.json"))
        )
        assert summary["n_samples"] == 2
        assert summary["uncertainty_source"] == "evidential"
        assert summary["dice_whole_tumor"] == pytest.approx(
            float(np.mean([r["dice_whole_tumor"] for r in rows]))
        )

    def test_eval_sigma_zero_is_clean(self, small_cfg, desk_data=None):
        cmd_generate(small_cfg)
        cmd_train(small_cfg, "evidential")
        rows = cmd_eval(small_cfg, "evidential", 0.0)
        # manual clean evaluation must agree exactly
        ckpt = load_checkpoint(os.path.join(small_cfg.out, "checkpoint_evidential.evck"))
        ddir = os.path.join(small_cfg.out, "dataset")
        img = read_volume(os.path.join(ddir, "sample_003_image.evol"))
        lab = read_volume(os.path.join(ddir, "sample_003_labels.evol"))
        prob, unc = predict(ckpt, znorm(img))
        rep = evaluate(prob, unc, lab, 4)
        assert rows[0]["dice_whole_tumor"] == rep.dice_whole_tumor
        assert rows[0]["ne"] == rep.ne

    def test_eval_noise_is_reproducible_per_sample(self, small_cfg):
        cmd_generate(small_cfg)
        cmd_train(small_cfg, "evidential")
        a = cmd_eval(small_cfg, "evidential", 1.5)
        b = cmd_eval(small_cfg, "evidential", 1.5)
        assert a == b

    def test_eval_rejects_negative_sigma(self, small_cfg):
        with pytest.raises(ValueError):
            cmd_eval(small_cfg, "evidential", -0.1)

    def test_eval_without_checkpoint(self, small_cfg):
        cmd_generate(small_cfg)
        with pytest.raises(FileNotFoundError):
            cmd_eval(small_cfg, "evidential", 0.0)

    def test_train_without_dataset(self, small_cfg):
        with pytest.raises(FileNotFoundError):
            cmd_train(small_cfg, "evidential")

    def test_sweep_outputs(self, small_cfg):
        cmd_generate(small_cfg)
        for head in small_cfg.heads:
            cmd_train(small_cfg, head)
        result = cmd_sweep(small_cfg)
        n_cells = len(small_cfg.heads) * len(small_cfg.noise_levels)
        assert len(result.summary) == n_cells
        assert len(result.rows) == n_cells * small_cfg.n_test
        for name in (
            "sweep.csv",
            "sweep_summary.csv",
            "sweep_dice.svg",
            "sweep_ne.svg",
            "sweep_ece.svg",
            "sweep_ueo.svg",
        ):
            assert os.path.exists(os.path.join(small_cfg.out, name))
        # summary means agree with the per-sample rows
        cell = [
            r
            for r in result.rows
            if r["head"] == "evidential" and r["sigma2"] == 0.5
        ]
        mean_row = next(
            s
            for s in result.summary
            if s["head"] == "evidential" and s["sigma2"] == 0.5
        )
        assert mean_row["ne"] == pytest.approx(
            float(np.mean([r["ne"] for r in cell])), abs=1e-12
        )


class TestSelfcheck:
    def test_passes_clean(self):
        lines = []
        assert cmd_selfcheck(out=lines.append) is True
        assert all(ln.startswith("PASS") for ln in lines)

    def test_fault_injection_fails_and_restores(self):
        from evidseg import losses

        before = losses._digamma_raw
        lines = []
        assert cmd_selfcheck(fault="digamma", out=lines.append) is False
        assert any(ln.startswith("FAIL") for ln in lines)
        assert losses._digamma_raw is before

    def test_unknown_fault_rejected(self):
        with pytest.raises(ValueError):
            cmd_selfcheck(fault="gamma")


class TestCli:
    def test_generate_then_train_then_sweep(self, tmp_path, capsys):
        cfg_path = _write_cfg(tmp_path, str(tmp_path / "run"))
        assert cli.main(["generate", "--config", cfg_path]) == 0
        assert cli.main(["train", "--config", cfg_path, "--head", "evidential"]) == 0
        assert cli.main(["eval", "--config", cfg_path, "--sigma2", "0.5"]) == 0
        assert cli.main(["train", "--config", cfg_path, "--head", "softmax"]) == 0
        assert cli.main(["sweep", "--config", cfg_path]) == 0
        out = capsys.readouterr().out
        assert "wrote 5 samples" in out and "swept 4" in out

    def test_out_override(self, tmp_path):
        cfg_path = _write_cfg(tmp_path, str(tmp_path / "run"))
        other = str(tmp_path / "elsewhere")
        assert cli.main(["generate", "--config", cfg_path, "--out", other]) == 0
        assert os.path.exists(os.path.join(other, "dataset", "manifest.json"))

    def test_usage_errors_exit_1(self, tmp_path, capsys):
        assert cli.main(["train"]) == 1  # missing --config
        bad = str(tmp_path / "bad.cfg")
        open(bad, "w").write("bogus = 1\n")
        assert cli.main(["generate", "--config", bad]) == 1
        assert cli.main(["nosuchcommand"]) == 1
        capsys.readouterr()

    def test_data_errors_exit_2(self, tmp_path, capsys):
        cfg_path = _write_cfg(tmp_path, str(tmp_path / "run"))
        assert cli.main(["train", "--config", cfg_path]) == 2  # no dataset yet
        assert cli.main(["generate", "--config", str(tmp_path / "missing.cfg")]) == 2
        capsys.readouterr()

    def test_selfcheck_exit_codes(self, capsys):
        assert cli.main(["selfcheck"]) == 0
        assert cli.main(["selfcheck", "--inject-fault", "digamma"]) == 3
        capsys.readouterr()
