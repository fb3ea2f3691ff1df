"""Command-line surface: subcommands, exit codes, emitted files."""
import csv
from pathlib import Path

import numpy as np
import pytest

from sasp.cli import main

FIXTURE_ROOT = Path(__file__).parent / "fixtures" / "mini_cub"


def write_config(path: Path, **overrides) -> Path:
    lines = ["# test run config"]
    for key, value in overrides.items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n")
    return path


def synth_and_config(tmp_path, **overrides) -> Path:
    assert main(["synth", "--classes", "4", "--per-class", "5", "--channels", "8",
                 "--height", "3", "--width", "3", "--seed", "11",
                 "--out", str(tmp_path / "data")]) == 0
    defaults = dict(
        features="data/features.sasp",
        manifest="data/manifest.json",
        out_dir="out",
        csw_reduction=4,
        head_hidden1=16,
        head_hidden2=16,
        dropout=0.0,
        batch_size=8,
        lr_init=0.01,
        lr_final=0.001,
        epochs=40,
        seed=3,
    )
    defaults.update(overrides)
    return write_config(tmp_path / "run.cfg", **defaults)


class TestUsage:
    def test_no_arguments_is_usage_error(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_positional(self, capsys):
        assert main(["train"]) == 1


class TestSynthTrainEval:
    def test_full_flow(self, tmp_path, capsys):
        cfg = synth_and_config(tmp_path)
        assert main(["train", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "train_accuracy" in out

        out_dir = tmp_path / "out"
        assert (out_dir / "model.ckpt").is_file()
        assert (out_dir / "trainlog.csv").is_file()
        assert (out_dir / "loss_curve.png").is_file()

        with open(out_dir / "trainlog.csv") as f:
            rows = list(csv.DictReader(f))
        assert rows[0]["epoch"] == "0"
        assert rows[0]["lr"] == "0.01"
        assert rows[-1]["train_acc"] != ""

        assert main(["eval", str(cfg), str(out_dir / "model.ckpt")]) == 0
        eval_out = capsys.readouterr().out
        accuracy = float(eval_out.split("eval_accuracy")[1].split()[0])
        assert accuracy >= 0.99

    def test_inspect_outputs(self, tmp_path, capsys):
        cfg = synth_and_config(tmp_path)
        assert main(["train", str(cfg)]) == 0
        capsys.readouterr()
        inspect_dir = tmp_path / "inspect"
        assert main(["inspect", str(tmp_path / "out" / "model.ckpt"),
                     str(tmp_path / "data" / "features.sasp"),
                     "--out", str(inspect_dir)]) == 0

        with open(inspect_dir / "alpha.csv") as f:
            rows = list(csv.DictReader(f))
        samples = {r["sample_id"] for r in rows}
        assert len(samples) == 20  # 4 classes x 5 records
        for sample in samples:
            per_sample = [r for r in rows if r["sample_id"] == sample]
            assert len(per_sample) == 8  # one row per channel
            values = [float(r["alpha"]) for r in per_sample]
            assert all(0.0 < v < 1.0 for v in values)

        with open(inspect_dir / "branch_responses.csv") as f:
            branch_rows = list(csv.DictReader(f))
        by_branch = {}
        for r in branch_rows:
            by_branch.setdefault(r["branch"], 0)
            by_branch[r["branch"]] += 1
        assert by_branch == {
            "loc": 8 * 9, "h": 8 * 9, "v": 8 * 9, "fused1": 8 * 9,
            "sh": 2 * 9, "sv": 2 * 9, "fused2": 2 * 9,
        }
        assert (inspect_dir / "alpha.png").is_file()
        assert (inspect_dir / "branch_responses.png").is_file()

    def test_inspect_single_sample(self, tmp_path, capsys):
        cfg = synth_and_config(tmp_path, epochs=2)
        assert main(["train", str(cfg)]) == 0
        inspect_dir = tmp_path / "one"
        assert main(["inspect", str(tmp_path / "out" / "model.ckpt"),
                     str(tmp_path / "data" / "features.sasp"),
                     "--sample-id", "synth-c002-s001", "--out", str(inspect_dir)]) == 0
        with open(inspect_dir / "alpha.csv") as f:
            rows = list(csv.DictReader(f))
        assert {r["sample_id"] for r in rows} == {"synth-c002-s001"}

    def test_inspect_unknown_sample_id(self, tmp_path, capsys):
        cfg = synth_and_config(tmp_path, epochs=2)
        assert main(["train", str(cfg)]) == 0
        assert main(["inspect", str(tmp_path / "out" / "model.ckpt"),
                     str(tmp_path / "data" / "features.sasp"),
                     "--sample-id", "nope"]) == 2


class TestConfigErrors:
    def test_unknown_key_names_it(self, tmp_path, capsys):
        cfg = synth_and_config(tmp_path)
        with open(cfg, "a") as f:
            f.write("learning_rate=0.5\n")
        assert main(["train", str(cfg)]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_duplicate_key_rejected(self, tmp_path, capsys):
        cfg = synth_and_config(tmp_path)
        with open(cfg, "a") as f:
            f.write("seed=4\n")
        assert main(["train", str(cfg)]) == 2
        assert "duplicate" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "absent.cfg")]) == 2

    def test_no_data_source(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.cfg", out_dir="out")
        assert main(["train", str(cfg)]) == 2
        assert "data source" in capsys.readouterr().err

    def test_architecture_mismatch_with_data(self, tmp_path, capsys):
        cfg = synth_and_config(tmp_path, channels=16)
        assert main(["train", str(cfg)]) == 2
        assert "channels" in capsys.readouterr().err


class TestNanAbort:
    def test_exit_3_with_last_finite_checkpoint(self, tmp_path, capsys):
        cfg = synth_and_config(tmp_path, lr_init=1e25, lr_final=1e24, epochs=5)
        with np.errstate(over="ignore", invalid="ignore"):
            assert main(["train", str(cfg)]) == 3
        err = capsys.readouterr().err
        assert "non-finite" in err
        out_dir = tmp_path / "out"
        assert (out_dir / "model.ckpt").is_file()
        assert (out_dir / "trainlog.csv").is_file()
        from sasp import load_checkpoint

        model = load_checkpoint(out_dir / "model.ckpt")
        for p in model.params():
            assert np.isfinite(p.data).all()


class TestIngestCheck:
    def test_mini_fixture(self, capsys):
        assert main(["ingest-check", str(FIXTURE_ROOT)]) == 0
        assert capsys.readouterr().out.strip() == "classes 2 train 4 test 2"

    def test_bad_root(self, tmp_path, capsys):
        assert main(["ingest-check", str(tmp_path / "nowhere")]) == 2


class TestImageTraining:
    def test_mini_cub_end_to_end(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "img.cfg",
            dataset_root=str(FIXTURE_ROOT),
            backbone_mode="tiny-cnn",
            input_h=16, input_w=16,
            channels=8, feature_h=4, feature_w=4,
            csw_reduction=4, head_hidden1=16, head_hidden2=16,
            dropout=0.0, batch_size=4, lr_init=0.01, lr_final=0.001,
            epochs=30, seed=5, out_dir="imgout",
        )
        assert main(["train", str(cfg)]) == 0
        out = capsys.readouterr().out
        train_acc = float(out.split("train_accuracy")[1].split()[0])
        assert train_acc == 1.0
        assert main(["eval", str(cfg), str(tmp_path / "imgout" / "model.ckpt")]) == 0

    def test_inspect_on_an_image(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "img.cfg",
            dataset_root=str(FIXTURE_ROOT),
            backbone_mode="tiny-cnn",
            input_h=16, input_w=16,
            channels=8, feature_h=4, feature_w=4,
            csw_reduction=4, head_hidden1=16, head_hidden2=16,
            dropout=0.0, batch_size=4, lr_init=0.01, lr_final=0.001,
            epochs=2, seed=5, out_dir="imgout",
        )
        assert main(["train", str(cfg)]) == 0
        image = FIXTURE_ROOT / "images" / "001.Rufous_Mock" / "Rufous_Mock_00.ppm"
        assert main(["inspect", str(tmp_path / "imgout" / "model.ckpt"), str(image),
                     "--out", str(tmp_path / "imginspect")]) == 0
        with open(tmp_path / "imginspect" / "alpha.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 8  # one sample, one row per channel
