import json

import pytest

from hinet import data
from hinet.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = root / "data"
    assert main(["phantom-gen", "--out", str(ds), "--subjects", "3", "--size", "60", "70", "--slices", "2"]) == 0
    assert main(["prepare-data", "--data", str(ds), "--train-fraction", "0.67"]) == 0
    cfg = {"dataset_root": str(ds), "crop": [48, 56], "model": {"input_size": [32, 32]},
           "train": {"epochs": 2, "decay_start_epoch": 1, "checkpoint_every": 1}}
    (root / "run.json").write_text(json.dumps(cfg))
    return root


def test_prepare_data_split(workspace):
    split = json.loads((workspace / "data" / "split.json").read_text())
    assert len(split["train_ids"]) == 2 and len(split["test_ids"]) == 1
    assert (workspace / "data" / "manifest.json").is_file()


def test_train_evaluate_synthesize_report(workspace, capsys):
    cfg, run = str(workspace / "run.json"), workspace / "run"
    assert main(["--config", cfg, "--run-dir", str(run), "train", "--run-id", "t1"]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["run_id"] == "t1" and manifest["variant"] == "hybrid"
    # 2 train subjects x 2 slices x 4 patches = 16 samples -> 4 steps per epoch
    assert (run / "loss_log.csv").read_text().count("\n") == 1 + 2 * 4
    ckpt = run / "ckpt_epoch_2"
    assert ckpt.is_file()

    assert main(["evaluate", "--config", cfg, "--run-dir", str(run / "eval"), "--checkpoint", str(ckpt)]) == 0
    assert "PSNR" in capsys.readouterr().out
    assert len((run / "eval" / "slices.csv").read_text().splitlines()) == 1 + 2

    out = workspace / "synth"
    assert main(["synthesize", "--config", cfg, "--checkpoint", str(ckpt),
                 "--subject-dir", str(workspace / "data" / "phantom_000"), "--out", str(out)]) == 0
    vol = data.load_volume(out / "Flair.hinv", "synthetic")
    assert vol.data.shape == (2, 48, 56)

    assert main(["report", "--run-dir", str(run)]) == 0
    printed = capsys.readouterr().out
    assert "loss_curves_run.png" in printed and "grid_run.png" in printed and "metrics.csv" in printed


def test_resume_flag(workspace):
    cfg, run = str(workspace / "run.json"), workspace / "run2"
    assert main(["--config", cfg, "--run-dir", str(run), "train"]) == 0
    assert main(["--config", cfg, "--run-dir", str(workspace / "run3"), "train",
                 "--resume", str(run / "ckpt_epoch_1")]) == 0
    assert (workspace / "run3" / "loss_log.csv").read_text().count("\n") == 1 + 4


def test_exit_codes(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["--config", str(bad), "--run-dir", str(tmp_path), "train"]) == 2
    assert main(["train", "--run-dir", str(tmp_path)]) == 2            # no dataset root
    assert main(["--run-dir", str(tmp_path), "train", "--dataset-root", str(tmp_path / "nope")]) == 3
    assert main(["synthesize", "--checkpoint", str(tmp_path / "missing"), "--subject-dir", str(tmp_path),
                 "--out", str(tmp_path)]) == 3
    assert main(["report", "--run-dir", str(tmp_path)]) == 3
    corrupt = tmp_path / "c"
    corrupt.write_bytes(b"HNCK" + b"\0" * 20)
    assert main(["synthesize", "--checkpoint", str(corrupt), "--subject-dir", str(tmp_path),
                 "--out", str(tmp_path)]) == 3
    assert "hinet:" in capsys.readouterr().err


def test_unknown_variant_rejected_by_parser():
    with pytest.raises(SystemExit) as info:
        main(["train", "--variant", "mid_fusion"])
    assert info.value.code == 2
