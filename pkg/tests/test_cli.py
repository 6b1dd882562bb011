import csv
import json

import numpy as np
import pytest

from trustcnn.cli import main, model_from_checkpoint
from trustcnn.data import load_dataset
from trustcnn.metrics import case_of, energy_in_mask
from trustcnn.nn.checkpoint import save_checkpoint
from trustcnn.pgm import read_pgm

FAST = ["--epochs", "2", "--pretrain-epochs", "1", "--batch", "8"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "ds"), "--classes", "square,circle", "--n", "6", "--seed", "7",
                 "--distractor"]) == 0
    assert main(["train", "--data", str(root / "ds"), "--out", str(root / "tw"), "--loss", "trustworthy",
                 "--method", "guided-gradcam", "--lambda", "0.9", "--lr", "0.01", *FAST]) == 0
    assert main(["train", "--data", str(root / "ds"), "--out", str(root / "ce"), "--loss", "ce", *FAST]) == 0
    return root


def test_gen_counts_and_hash(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "a"), "--classes", "square,circle", "--n", "200", "--seed",
                 "7"]) == 0
    first = capsys.readouterr().out.split()
    assert main(["gen", "--out", str(tmp_path / "b"), "--classes", "square,circle", "--n", "200", "--seed",
                 "7"]) == 0
    second = capsys.readouterr().out.split()
    assert first[-1] == second[-1]
    assert len(list((tmp_path / "a" / "images").glob("*.pgm"))) == 400
    assert (tmp_path / "a" / "manifest.csv").exists()


def test_gen_single_class_is_usage_error(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--classes", "square"]) == 1


def test_unknown_flag_is_usage_error(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--bogus"]) == 1


def test_config_file_and_unknown_keys(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"classes": "circle,cross", "n": 2, "seed": 5}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d"), "--n", "3"]) == 0
    data = load_dataset(tmp_path / "d")
    assert len(data) == 6  # flag wins over the file
    cfg.write_text(json.dumps({"n": 2, "colour": "red"}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 1


def test_train_outputs_and_summary(workspace, capsys):
    assert main(["train", "--data", str(workspace / "ds"), "--out", str(workspace / "ab"), "--ablation", "r1zero",
                 *FAST]) == 0
    out = capsys.readouterr().out
    assert "final_accuracy" in out and "mean_s_hat" in out
    assert (workspace / "ab" / "model.ckpt").exists()
    rows = list(csv.reader((workspace / "ab" / "loss.csv").open()))
    assert rows[0] == ["step", "ce", "s_hat", "r1", "r2", "total", "lambda"]


def test_train_missing_data_is_io_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_train_nan_exit_code(workspace, tmp_path):
    from trustcnn.nn.layers import default_model
    model = default_model(2)
    model.layer("conv1").weight.data[:] = np.nan
    save_checkpoint(model, tmp_path / "bad.ckpt")
    head = ["train", "--data", str(workspace / "ds"), "--out", str(tmp_path / "o"), "--backbone"]
    assert main(head + [str(workspace / "tw" / "model.ckpt")]) == 1
    code = main(["train", "--data", str(workspace / "ds"), "--out", str(tmp_path / "o"), "--backbone",
                 str(tmp_path / "bad.ckpt"), "--epochs", "1"])
    assert code == 3


def test_saliency_export_and_sidecar(workspace, tmp_path):
    out = tmp_path / "maps"
    assert main(["saliency", "--checkpoint", str(workspace / "tw" / "model.ckpt"), "--data",
                 str(workspace / "ds"), "--method", "gradcam", "--out", str(out)]) == 0
    data = load_dataset(workspace / "ds")
    rows = list(csv.DictReader((out / "saliency.csv").open()))
    assert len(rows) == len(data) == len(list(out.glob("*.pgm")))
    by_id = {e.id: e for e in data}
    for row in rows:
        ex = by_id[int(row["id"])]
        m = read_pgm(out / row["file"])
        assert int(row["true"]) == ex.label
        expect = case_of(int(row["pred"]), ex.label, energy_in_mask(m, ex.mask) >= 0.5)
        assert int(row["case"]) == int(expect)


def test_saliency_zero_head_gives_zero_maps(workspace, tmp_path):
    model = model_from_checkpoint(workspace / "tw" / "model.ckpt")
    model.layer("transfer").weight.data[:] = 0
    model.layer("transfer").bias.data[:] = 0
    save_checkpoint(model, tmp_path / "zero.ckpt")
    assert main(["saliency", "--checkpoint", str(tmp_path / "zero.ckpt"), "--data", str(workspace / "ds"),
                 "--method", "gradcam", "--out", str(tmp_path / "z")]) == 0
    for f in (tmp_path / "z").glob("*.pgm"):
        assert not read_pgm(f).any()


def test_saliency_unknown_method(workspace, tmp_path, capsys):
    code = main(["saliency", "--checkpoint", str(workspace / "tw" / "model.ckpt"), "--data",
                 str(workspace / "ds"), "--method", "occlusion", "--out", str(tmp_path)])
    assert code == 1
    assert "gradcam, guided-backprop, guided-gradcam" in capsys.readouterr().err


def test_compare_with_itself(workspace, capsys):
    ck = str(workspace / "tw" / "model.ckpt")
    assert main(["compare", "--a", ck, "--b", ck, "--data", str(workspace / "ds")]) == 0
    out = capsys.readouterr().out
    assert "mean SSIM (guided-gradcam) 1.000000" in out
    lines = [l for l in out.splitlines() if l.startswith(("A ", "B "))]
    assert lines[0].split()[2:] == lines[1].split()[2:]
    assert "Case 1" in out and "(" in out


def test_compare_baseline_vs_trustworthy(workspace, tmp_path, capsys):
    assert main(["compare", "--a", str(workspace / "ce" / "model.ckpt"), "--b", str(workspace / "tw" / "model.ckpt"),
                 "--data", str(workspace / "ds"), "--out", str(tmp_path)]) == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert float(first.split()[-1]) < 1.0
    assert (tmp_path / "compare.csv").exists() and (tmp_path / "compare.txt").exists()


def test_compare_architecture_mismatch(workspace, tmp_path):
    from trustcnn.nn.layers import default_model
    save_checkpoint(default_model(2), tmp_path / "plain.ckpt")
    code = main(["compare", "--a", str(tmp_path / "plain.ckpt"), "--b", str(workspace / "tw" / "model.ckpt"),
                 "--data", str(workspace / "ds")])
    assert code == 2


def test_reproduce_small_and_rejects_arm_flags(tmp_path):
    assert main(["reproduce", "--out", str(tmp_path), "--method", "gradcam"]) == 1
    assert main(["reproduce", "--out", str(tmp_path / "r"), "--seeds", "1", "--n", "2", "--epochs", "1"]) == 0
    rows = list(csv.DictReader((tmp_path / "r" / "results.csv").open()))
    assert len(rows) == 7
    assert (tmp_path / "r" / "table.txt").read_text().count("Accuracy") == 1
