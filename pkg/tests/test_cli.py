import csv
from pathlib import Path

import filelock
import numpy as np
import pytest

from vnibcreg.cli import code_version, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = ["--profile", "desk",
        "--set", "dataset.synthetic_n_per_class=6", "--set", "train.epochs=1", "--set", "train.batch_size=8",
        "--set", "eval.seeds=0", "--set", "eval.epochs=3", "--set", "eval.finetune_epochs=1",
        "--set", "eval.n_percents=80", "--set", "preprocess.target_height=32"]


def assert_run_metadata(out):
    assert (out / "config.json").is_file() and (out / "run.log").is_file()
    assert (out / "VERSION").read_text().strip() == code_version()


def test_no_subcommand_prints_usage(capsys):
    assert main([]) != 0
    assert "usage" in capsys.readouterr().err


def test_gradcheck_table(tmp_path, capsys):
    assert main(["gradcheck", "--instances", "2", "--out", str(tmp_path)]) == 0
    table = capsys.readouterr().out
    assert table.count("PASS") == 7 and "FAIL" not in table
    assert (tmp_path / "gradcheck.txt").is_file()
    assert_run_metadata(tmp_path)


def test_bad_key_gives_one_line_error_and_log(tmp_path, capsys):
    assert main(["pretrain", "--set", "train.epoch=3", "--out", str(tmp_path)]) == 1
    err = [line for line in capsys.readouterr().err.splitlines() if line.startswith("error")]
    assert len(err) == 1 and "train.epoch" in err[0]
    assert "Traceback" in (tmp_path / "run.log").read_text()


@pytest.mark.parametrize("argv", [
    ["ingest", "missing.npz"],
    ["linear", "--checkpoint", "missing.pt"],
    ["pretrain", "--config", "missing.toml"],
    ["pretrain"],  # full profile without a manifest
])
def test_missing_paths_fail(tmp_path, argv, capsys):
    assert main(argv[:1] + ["--out", str(tmp_path)] + argv[1:]) != 0
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error")


def test_lock_file_rejects_concurrent_runs(tmp_path, capsys):
    with filelock.FileLock(str(tmp_path / ".lock")):
        assert main(["gradcheck", "--instances", "1", "--out", str(tmp_path)]) == 3
    assert "in use" in capsys.readouterr().err


def test_synth_and_ingest(tmp_path):
    assert main(["synth", "--profile", "desk", "--set", "dataset.synthetic_n_per_class=1",
                 "--out", str(tmp_path / "syn")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "syn" / "manifest.csv")))
    assert len(rows) == 3
    w = np.zeros((2, 24, 16000), np.float32)
    np.savez(tmp_path / "drop.npz", waveforms=w, labels=np.array(["Noise", "Spike"]))
    assert main(["ingest", str(tmp_path / "drop.npz"), "--out", str(tmp_path / "ing")]) == 0
    assert len(list(csv.DictReader(open(tmp_path / "ing" / "manifest.csv")))) == 2
    assert_run_metadata(tmp_path / "ing")


def test_pretrain_resume_linear_finetune(tmp_path, capsys):
    out = tmp_path / "pt"
    assert main(["pretrain", *TINY, "--out", str(out)]) == 0
    assert (out / "loss_curves.png").is_file() and (out / "checkpoint.pt").is_file()
    n_rows = len((out / "loss_log.csv").read_text().splitlines())
    assert main(["pretrain", *TINY, "--set", "train.epochs=2", "--resume", "--out", str(out)]) == 0
    log = list(csv.DictReader(open(out / "loss_log.csv")))
    assert len(log) == 2 * (n_rows - 1) and sorted({r["epoch"] for r in log}) == ["0", "1"]
    assert "resuming from epoch 1" in (out / "run.log").read_text()

    assert main(["linear", *TINY, "--checkpoint", str(out / "checkpoint.pt"), "--out", str(tmp_path / "lin")]) == 0
    assert (tmp_path / "lin" / "linear.md").is_file() and (tmp_path / "lin" / "confusion.png").is_file()
    assert main(["finetune", *TINY, "--out", str(tmp_path / "ft")]) == 0
    assert (tmp_path / "ft" / "finetune_n80.csv").is_file()
    assert (tmp_path / "ft" / "pretrain" / "seed0" / "loss_curves.png").is_file()


def test_ablation_writes_six_row_table(tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablation", "--config", str(CONFIGS / "full.toml"), *TINY, "--out", str(out)]) == 0
    md = (out / "ablation.md").read_text().splitlines()
    assert len(md) == 2 + 6 and "n/a" not in "".join(md)
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert {r["method"] for r in rows} == {"RandInit", "naive TNC", "naive VIbCReg", "VIbCReg+NC",
                                           "VIbCReg+NC+TNC-original", "VNIbCReg"}
    assert len(list(out.glob("confusion_*.png"))) == 6
    assert_run_metadata(out)


def test_ablation_unknown_row(tmp_path):
    assert main(["ablation", *TINY, "--rows", "Nope", "--out", str(tmp_path)]) == 1
