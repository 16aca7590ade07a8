"""End-to-end CLI tests through main(): files, figures, and exit codes."""

import json

import numpy as np
import pytest

from sosr.cli import main
from sosr.data import load_cifar_binary
from tests.test_data import synthetic_cifar_file

TINY_CONFIG = """
dataset = blobs
blobs.classes = 5
blobs.per_class = 40
blobs.val_per_class = 20
blobs.dim = 4
model = dense(4,16) relu dense(16,5)
epochs = 3
batch_size = 32
lr = 0.1
regularizer = sosr
sosr.threshold_p = 0.9
census.thresholds = 0.5,0.9
seeds = 0,1
"""

BLOBS_RECIPE = "blobs:classes=5,per_class=40,val_per_class=20,dim=4,separation=6.0,noise_sigma=1.0,seed=0"


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CONFIG)
    return path


def strip_wall_time(csv_text: str) -> str:
    return "\n".join(line.rsplit(",", 1)[0] for line in csv_text.splitlines())


class TestTrainCommand:
    def test_writes_all_artifacts(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["train", "--config", str(config_file), "--out", str(out)]) == 0
        for name in ("metrics.csv", "metrics.json", "model.ckpt", "curves.png", "census.png"):
            assert (out / name).exists(), name
        assert "val_acc" in capsys.readouterr().out
        summary = json.loads((out / "metrics.json").read_text())
        assert summary["epochs_completed"] == 3

    def test_deterministic_metrics_apart_from_wall_time(self, config_file, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["train", "--config", str(config_file), "--out", str(out_a)])
        main(["train", "--config", str(config_file), "--out", str(out_b)])
        a = strip_wall_time((out_a / "metrics.csv").read_text())
        b = strip_wall_time((out_b / "metrics.csv").read_text())
        assert a == b

    def test_seed_flag_changes_run(self, config_file, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["train", "--config", str(config_file), "--out", str(out_a)])
        main(["train", "--config", str(config_file), "--out", str(out_b), "--seed", "7"])
        a = strip_wall_time((out_a / "metrics.csv").read_text())
        b = strip_wall_time((out_b / "metrics.csv").read_text())
        assert a != b

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text(TINY_CONFIG + "\nnot_a_key = 1\n")
        assert main(["train", "--config", str(bad)]) == 2
        assert "unknown key" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_numeric_failure_exit_code_and_partial_csv(self, tmp_path, capsys):
        cfg = tmp_path / "explode.cfg"
        cfg.write_text(TINY_CONFIG.replace("lr = 0.1", "lr = 1e25"))
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 3
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,train_loss")
        assert "non-finite" in capsys.readouterr().err


class TestCensusCommand:
    def test_counts_monotone(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        main(["train", "--config", str(config_file), "--out", str(out)])
        capsys.readouterr()
        code = main(
            [
                "census",
                "--checkpoint",
                str(out / "model.ckpt"),
                "--data",
                BLOBS_RECIPE,
                "--thresholds",
                "0.5,0.9,0.99",
            ]
        )
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "threshold,count"
        counts = [int(line.split(",")[1]) for line in lines[1:]]
        assert counts == sorted(counts, reverse=True)

    def test_bad_recipe_exit_code(self, config_file, tmp_path):
        out = tmp_path / "out"
        main(["train", "--config", str(config_file), "--out", str(out)])
        assert main(["census", "--checkpoint", str(out / "model.ckpt"), "--data", "bogus:x=1"]) == 2


class TestSweepCommand:
    def test_writes_table_and_figure(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.cfg"
        cfg.write_text(TINY_CONFIG.replace("seeds = 0,1", "seeds = 0"))
        out = tmp_path / "out"
        code = main(
            ["sweep", "--config", str(cfg), "--axis", "p", "--values", "0.7,0.99", "--out", str(out)]
        )
        assert code == 0
        table = (out / "sweep_p.csv").read_text().splitlines()
        assert table[0] == "p,mean_val_acc,std_val_acc,seed_val_accs"
        assert len(table) == 3
        assert (out / "sweep_p.png").exists()

    def test_sweep_without_sosr_is_config_error(self, tmp_path):
        cfg = tmp_path / "plain.cfg"
        cfg.write_text(TINY_CONFIG.replace("regularizer = sosr", "regularizer = none"))
        assert main(["sweep", "--config", str(cfg), "--axis", "beta", "--values", "1"]) == 2


class TestMakeImbalancedCommand:
    def test_long_tailed_file(self, tmp_path, capsys):
        src = tmp_path / "balanced.bin"
        rows = np.zeros((100, 1 + 3072), dtype=np.uint8)
        rows[:, 0] = np.repeat(np.arange(10), 10)
        rows.tofile(src)
        dst = tmp_path / "tailed.bin"
        code = main(
            [
                "make-imbalanced",
                "--in",
                str(src),
                "--rho",
                "10",
                "--out",
                str(dst),
                "--layout",
                "cifar10",
            ]
        )
        assert code == 0
        ds = load_cifar_binary(dst, layout="cifar10")
        counts = ds.class_counts()
        assert counts[0] == 10 and counts[9] == 1
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_bad_rho(self, tmp_path):
        src = tmp_path / "x.bin"
        synthetic_cifar_file(src, 4)
        assert main(["make-imbalanced", "--in", str(src), "--rho", "0.5", "--out", "y"]) == 2

    def test_malformed_file_exit_code(self, tmp_path, capsys):
        src = tmp_path / "broken.bin"
        src.write_bytes(b"\x01" * 100)
        out = tmp_path / "y.bin"
        assert main(["make-imbalanced", "--in", str(src), "--rho", "10", "--out", str(out)]) == 2
        assert "record" in capsys.readouterr().err


class TestExportFeaturesCommand:
    def test_csv_and_svg(self, tmp_path, capsys):
        cfg = tmp_path / "bottleneck.cfg"
        # a gentler lr: the linear bottleneck diverges at 0.1 with momentum
        cfg.write_text(
            TINY_CONFIG.replace(
                "model = dense(4,16) relu dense(16,5)",
                "model = dense(4,16) relu dense(16,2) dense(2,5)",
            ).replace("lr = 0.1", "lr = 0.02")
        )
        out = tmp_path / "out"
        main(["train", "--config", str(cfg), "--out", str(out)])
        feat_csv = tmp_path / "features.csv"
        code = main(
            [
                "export-features",
                "--checkpoint",
                str(out / "model.ckpt"),
                "--data",
                BLOBS_RECIPE,
                "--out",
                str(feat_csv),
            ]
        )
        assert code == 0
        assert feat_csv.read_text().splitlines()[0] == "x,y,label"
        assert (tmp_path / "features.svg").exists()

    def test_wide_penultimate_is_config_error(self, config_file, tmp_path):
        out = tmp_path / "out"
        main(["train", "--config", str(config_file), "--out", str(out)])
        code = main(
            [
                "export-features",
                "--checkpoint",
                str(out / "model.ckpt"),
                "--data",
                BLOBS_RECIPE,
                "--out",
                str(tmp_path / "f.csv"),
            ]
        )
        assert code == 2


class TestReportCommand:
    def test_renders_from_existing_csv(self, config_file, tmp_path):
        out = tmp_path / "out"
        main(["train", "--config", str(config_file), "--out", str(out)])
        report_dir = tmp_path / "report"
        code = main(["report", "--metrics", str(out / "metrics.csv"), "--out", str(report_dir)])
        assert code == 0
        assert (report_dir / "curves.png").exists()
        assert (report_dir / "census.png").exists()
