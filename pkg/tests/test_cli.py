import csv
import io
import json

import numpy as np
import pytest

from idcnet.cli import RunConfig, main
from idcnet.data import write_synthetic_dataset


@pytest.fixture(scope="module")
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_synthetic_dataset(root, 24, seed=5)
    return root


def write_config(path, data_root, out_dir, extra=""):
    path.write_text(f"""
[run]
seed = 3
output_dir = {out_dir}

[data]
data_root = {data_root}
train_size = 10
val_size = 6

[model]
blocks = 4:2:2,P,P
dense_width = 8
dropout = 0.4

[train]
batch_size = 4
max_epochs = 2
{extra}
""")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_root):
    out_dir = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp_path_factory.mktemp("cfg") / "run.ini", dataset_root, out_dir)
    code = main(["train", "--config", str(cfg)])
    assert code == 0
    return out_dir


class TestTrainCommand:
    def test_outputs_exist(self, trained):
        assert (trained / "best.ckpt").exists()
        assert (trained / "split.json").exists()
        lines = (trained / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert set(first) == {"epoch", "train_loss", "val_accuracy", "lr", "seconds"}

    def test_rerun_is_deterministic(self, tmp_path, dataset_root, trained):
        cfg = write_config(tmp_path / "run.ini", dataset_root, tmp_path / "out")
        assert main(["train", "--config", str(cfg)]) == 0
        def decisions(p):
            return [
                {k: v for k, v in json.loads(line).items() if k != "seconds"}
                for line in (p / "train_log.jsonl").read_text().splitlines()
            ]
        assert decisions(tmp_path / "out") == decisions(trained)

    def test_invalid_config_fails_before_any_write(self, tmp_path, dataset_root):
        out = tmp_path / "never"
        cfg = write_config(tmp_path / "bad.ini", dataset_root, out,
                           extra="lr_init = 1e-12\nlr_min = 1e-3")
        assert main(["train", "--config", str(cfg)]) == 1
        assert not out.exists()

    def test_missing_dataset_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "run.ini", tmp_path / "nowhere", tmp_path / "out")
        assert main(["train", "--config", str(cfg)]) == 1
        assert not (tmp_path / "out").exists()

    def test_set_overrides_file_values(self, tmp_path, dataset_root):
        cfg = write_config(tmp_path / "run.ini", dataset_root, tmp_path / "out")
        code = main(["train", "--config", str(cfg), "--set", "train.max_epochs=1"])
        assert code == 0
        lines = (tmp_path / "out" / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 1

    def test_unknown_override_rejected(self, tmp_path, dataset_root):
        cfg = write_config(tmp_path / "run.ini", dataset_root, tmp_path / "out")
        assert main(["train", "--config", str(cfg), "--set", "train.warp_speed=9"]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.ini")]) == 1


class TestEvalCommand:
    def test_report_on_test_part(self, trained, dataset_root, capsys):
        code = main(["eval", "--checkpoint", str(trained / "best.ckpt"),
                     "--split", str(trained / "split.json"),
                     "--data", str(dataset_root)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["part"] == "test"
        assert report["n"] == 8  # 24 records minus 10 train minus 6 val
        assert report["tp"] + report["fp"] + report["tn"] + report["fn"] == 8
        assert 0.0 <= report["auc"] <= 1.0

    def test_report_file_and_roc_csv(self, trained, dataset_root, tmp_path, capsys):
        out = tmp_path / "report.json"
        roc = tmp_path / "roc.csv"
        code = main(["eval", "--checkpoint", str(trained / "best.ckpt"),
                     "--split", str(trained / "split.json"),
                     "--data", str(dataset_root),
                     "--part", "val", "--out", str(out), "--roc-csv", str(roc)])
        assert code == 0
        capsys.readouterr()
        stored = json.loads(out.read_text())
        assert stored["n"] == 6
        rows = roc.read_text().splitlines()
        assert rows[0] == "fpr,tpr"

    def test_missing_checkpoint_is_runtime_error(self, trained, tmp_path):
        code = main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--split", str(trained / "split.json")])
        assert code == 2


class TestPredictCommand:
    def test_directory_input_emits_csv(self, trained, dataset_root, capsys):
        code = main(["predict", "--checkpoint", str(trained / "best.ckpt"),
                     "--input", str(dataset_root)])
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert len(rows) == 24
        for row in rows:
            assert 0.0 <= float(row["probability"]) <= 1.0

    def test_single_file_input(self, trained, dataset_root, tmp_path, capsys):
        some_patch = next(dataset_root.rglob("*.png"))
        out = tmp_path / "pred.csv"
        code = main(["predict", "--checkpoint", str(trained / "best.ckpt"),
                     "--input", str(some_patch), "--out", str(out)])
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 1
        assert rows[0]["path"] == str(some_patch)


class TestHeatmapCommand:
    def test_writes_images_and_sidecar(self, trained, dataset_root, tmp_path, capsys):
        out_dir = tmp_path / "hm"
        code = main(["heatmap", "--checkpoint", str(trained / "best.ckpt"),
                     "--data", str(dataset_root), "--patient", "90000",
                     "--out-dir", str(out_dir), "--kernel-size", "9"])
        assert code == 0
        for name in ("original.png", "heatmap_raw.png", "overlay.png", "slide.json"):
            assert (out_dir / name).exists(), name
        sidecar = json.loads((out_dir / "slide.json").read_text())
        assert sidecar["patch_count"] == 12
        assert 0.0 <= sidecar["mean_probability"] <= 1.0

    def test_renders_are_deterministic(self, trained, dataset_root, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            out_dir = tmp_path / name
            assert main(["heatmap", "--checkpoint", str(trained / "best.ckpt"),
                         "--data", str(dataset_root), "--patient", "90001",
                         "--out-dir", str(out_dir), "--kernel-size", "9"]) == 0
            outs.append(out_dir)
        for name in ("original.png", "heatmap_raw.png", "overlay.png"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_unknown_patient_lists_available(self, trained, dataset_root, capsys):
        code = main(["heatmap", "--checkpoint", str(trained / "best.ckpt"),
                     "--data", str(dataset_root), "--patient", "nope"])
        assert code == 2
        err = capsys.readouterr().err
        assert "90000" in err and "90001" in err


class TestGradcheckCommand:
    def test_reports_every_layer_kind_once_and_passes(self, capsys):
        code = main(["gradcheck"])
        out = capsys.readouterr().out
        assert code == 0
        for kind in ("conv2d_k1", "conv2d_k3", "conv2d_k5", "maxpool2d", "dense",
                     "batch_norm", "softmax_cross_entropy", "inception_block"):
            assert out.count(f" {kind}:") == 1
        assert "FAIL" not in out

    def test_failure_gives_exit_code_3(self, monkeypatch, capsys):
        monkeypatch.setattr("idcnet.cli.run_layer_checks",
                            lambda: {"conv2d_k1": 1.0, "dense": 1e-9})
        assert main(["gradcheck"]) == 3
        out = capsys.readouterr().out
        assert "FAIL conv2d_k1" in out and "PASS dense" in out


class TestRunConfig:
    def test_ini_round_trip_and_types(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[train]\nbatch_size = 16\nlr_init = 5e-4\n"
                     "[data]\npatient_level = true\n")
        cfg = RunConfig.from_ini(p)
        assert cfg.batch_size == 16
        assert cfg.lr_init == 5e-4
        assert cfg.patient_level is True

    def test_block_spec_parsing(self):
        cfg = RunConfig(blocks="64,64,P,128:48:40")
        blocks = cfg.parse_blocks()
        assert blocks[2] == "maxpool"
        assert blocks[0].features == 64 and blocks[0].alpha == 32
        assert (blocks[3].features, blocks[3].alpha, blocks[3].beta) == (128, 48, 40)

    def test_bad_block_spec(self):
        with pytest.raises(ValueError):
            RunConfig(blocks="64,Q").parse_blocks()

    def test_override_parsing(self):
        cfg = RunConfig()
        cfg.apply_overrides(["train.lr_init=2e-3", "model.dense_width=256"])
        assert cfg.lr_init == 2e-3
        assert cfg.dense_width == 256
        with pytest.raises(ValueError):
            cfg.apply_overrides(["no_dots"])
