"""End-to-end command line flows in temporary directories: every
subcommand, the flag > config file > default precedence rules, run-dir
self-containment, and the one-line error[<class>] contract with exit 2."""

import csv
import json

import numpy as np
import pytest

from vslr.cli import dispatch
from vslr.train import ABLATION_COLUMNS

MODEL_FLAGS = ["--dim", "16", "--depth", "2", "--heads", "2", "--patch", "8",
               "--crop", "16", "--frames", "4"]


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    """One synthetic dataset plus one finished fine-tuning run."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert dispatch(["gen-data", "--out", str(data), "--classes", "2",
                     "--per-class", "6", "--frames", "6", "--size", "16",
                     "--seed", "3"]) == 0
    assert dispatch(["finetune", "--data", str(data), "--out", str(run),
                     "--epochs", "1", "--batch", "4", "--lr", "1e-3",
                     "--layers", "all", "--seed", "5", *MODEL_FLAGS]) == 0
    return data, run


# ---------------------------------------------------------------------------
# data generation and validation


def test_gen_data_writes_dataset(tmp_path, capsys):
    out = tmp_path / "ds"
    assert dispatch(["gen-data", "--out", str(out), "--classes", "2",
                     "--per-class", "6", "--frames", "6", "--size", "16"]) == 0
    assert (out / "manifest.json").exists()
    assert (out / "videos").is_dir()
    echo = json.loads((out / "config.json").read_text())
    assert echo["command"] == "gen-data"
    assert echo["resolved"]["classes"] == 2
    assert "wrote 12 videos, 2 classes" in capsys.readouterr().out


def test_gen_data_requires_out(capsys):
    assert dispatch(["gen-data"]) == 2
    err = capsys.readouterr().err.strip()
    assert err == "error[config]: --out is required"
    assert "\n" not in err


def test_validate_manifest(env, capsys):
    data, _ = env
    assert dispatch(["validate-manifest", "--manifest",
                     str(data / "manifest.json")]) == 0
    assert "manifest OK: 2 glosses, 12 instances" in capsys.readouterr().out


def test_validate_manifest_strict_bounds(env, capsys):
    data, _ = env
    # 2 glosses and 12 videos are far outside the 100-gloss benchmark bounds
    assert dispatch(["validate-manifest", "--manifest",
                     str(data / "manifest.json"), "--wlasl100"]) == 2
    assert capsys.readouterr().err.startswith("error[manifest]:")


def test_validate_manifest_missing_file(tmp_path, capsys):
    assert dispatch(["validate-manifest", "--manifest",
                     str(tmp_path / "nope.json")]) == 2
    assert capsys.readouterr().err.startswith("error[io]:")


# ---------------------------------------------------------------------------
# training runs


def test_finetune_run_is_self_contained(env):
    _, run = env
    for name in ("config.json", "model.ckpt", "train_log.csv", "reports.json"):
        assert (run / name).exists(), name
    stored = json.loads((run / "config.json").read_text())
    assert stored["model"]["dim"] == 16
    assert stored["num_classes"] == 2
    assert stored["pipeline"] == {"frames": 4, "sampling": "consecutive", "crop": 16}
    reports = json.loads((run / "reports.json").read_text())
    assert len(reports) == 1 and "1" in reports[0]["topk"]


def test_evaluate_from_run_dir(env, capsys):
    data, run = env
    assert dispatch(["evaluate", "--data", str(data), "--run", str(run)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report["topk"]) == {"1", "5", "10"}
    assert report["num_instances"] == 2
    assert report["config"]["split"] == "test"


def test_evaluate_split_and_sampling_override(env, capsys):
    data, run = env
    assert dispatch(["evaluate", "--data", str(data), "--run", str(run),
                     "--split", "train", "--sampling", "even"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["num_instances"] == 8
    assert report["config"]["sampling"] == "even"


def test_evaluate_head_class_mismatch(env, tmp_path, capsys):
    _, run = env
    other = tmp_path / "threeclass"
    assert dispatch(["gen-data", "--out", str(other), "--classes", "3",
                     "--per-class", "6", "--frames", "6", "--size", "16"]) == 0
    capsys.readouterr()
    assert dispatch(["evaluate", "--data", str(other), "--run", str(run)]) == 2
    assert capsys.readouterr().err.startswith("error[head/class mismatch]:")


def test_evaluate_rejects_bare_directory(env, tmp_path, capsys):
    data, _ = env
    assert dispatch(["evaluate", "--data", str(data), "--run", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error[io]:") and "config.json" in err


# ---------------------------------------------------------------------------
# attention maps


def test_attn_map_exports_frames(env, tmp_path, capsys):
    data, run = env
    manifest = json.loads((data / "manifest.json").read_text())
    vid = manifest[0]["instances"][0]["video_id"]
    out = tmp_path / "heat"
    assert dispatch(["attn-map", "--data", str(data), "--run", str(run),
                     "--video", vid, "--out", str(out)]) == 0
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == 4
    index = json.loads((out / "index.json").read_text())
    assert index["video"] == vid
    assert index["grid"] == [4, 2, 2]
    assert index["frames"] == [p.name for p in pgms]
    assert pgms[0].read_bytes().startswith(b"P5\n2 2\n255\n")


def test_attn_map_start_frame_conflicts_with_even(env, tmp_path, capsys):
    data, run = env
    manifest = json.loads((data / "manifest.json").read_text())
    vid = manifest[0]["instances"][0]["video_id"]
    assert dispatch(["attn-map", "--data", str(data), "--run", str(run),
                     "--video", vid, "--out", str(tmp_path / "h"),
                     "--start-frame", "1", "--sampling", "even"]) == 2
    err = capsys.readouterr().err.strip()
    assert err == "error[conflict]: --start-frame conflicts with --sampling even"


def test_attn_map_unknown_video(env, tmp_path, capsys):
    data, run = env
    assert dispatch(["attn-map", "--data", str(data), "--run", str(run),
                     "--video", "ghost", "--out", str(tmp_path / "h")]) == 2
    assert capsys.readouterr().err.startswith("error[config]:")


# ---------------------------------------------------------------------------
# ablation grids


def test_ablate_writes_csv(env, tmp_path, capsys):
    data, _ = env
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps([
        {"epochs": 1, "lr": 1e-3, "sampling": "consecutive", "layers": "all"},
        {"epochs": 1, "lr": 1e-4, "sampling": "even", "layers": 1},
    ]))
    out = tmp_path / "abl"
    assert dispatch(["ablate", "--data", str(data), "--grid", str(grid),
                     "--out", str(out), *MODEL_FLAGS]) == 0
    with open(out / "ablation.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ABLATION_COLUMNS
    assert len(rows) == 3
    assert rows[1][6] == "Consec." and rows[2][6] == "Even"
    assert "wrote 2 ablation rows" in capsys.readouterr().out


def test_ablate_rejects_bad_grid(env, tmp_path, capsys):
    data, _ = env
    bad = tmp_path / "bad.json"
    bad.write_text("{\"not\": \"a list\"}")
    assert dispatch(["ablate", "--data", str(data), "--grid", str(bad),
                     "--out", str(tmp_path / "o"), *MODEL_FLAGS]) == 2
    assert "error[config]" in capsys.readouterr().err
    assert dispatch(["ablate", "--data", str(data), "--grid",
                     str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "o"), *MODEL_FLAGS]) == 2
    assert capsys.readouterr().err.startswith("error[io]:")


# ---------------------------------------------------------------------------
# pretraining and encoder transfer


def test_pretrain_then_finetune_init_from(env, tmp_path, capsys):
    data, _ = env
    pre = tmp_path / "pre"
    assert dispatch(["pretrain", "--data", str(data), "--out", str(pre),
                     "--steps", "3", "--batch", "2", "--ratio", "0.75",
                     "--dim", "16", "--depth", "2", "--heads", "2",
                     "--decoder-dim", "8", "--decoder-depth", "1",
                     "--decoder-heads", "2", "--patch", "8", "--crop", "16",
                     "--frames", "4"]) == 0
    ckpt = pre / "mae_final.ckpt"
    assert ckpt.exists() and (pre / "loss.csv").exists()
    assert "pretrained 3 steps" in capsys.readouterr().out

    ft = tmp_path / "ft"
    assert dispatch(["finetune", "--data", str(data), "--out", str(ft),
                     "--epochs", "1", "--variant", "joint",
                     "--init-from", str(ckpt), *MODEL_FLAGS]) == 0
    assert (ft / "model.ckpt").exists()

    # width mismatch between checkpoint and model is a checkpoint error
    capsys.readouterr()
    assert dispatch(["finetune", "--data", str(data), "--out", str(tmp_path / "x"),
                     "--epochs", "1", "--variant", "joint",
                     "--init-from", str(ckpt), "--dim", "24", "--depth", "2",
                     "--heads", "2", "--patch", "8", "--crop", "16",
                     "--frames", "4"]) == 2
    assert capsys.readouterr().err.startswith("error[checkpoint]:")


# ---------------------------------------------------------------------------
# config files and parser behavior


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("classes = 3\nsize = 20\n")
    out = tmp_path / "ds"
    assert dispatch(["gen-data", "--out", str(out), "--config", str(cfg),
                     "--size", "16", "--per-class", "6", "--frames", "6"]) == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["resolved"]["classes"] == 3      # file supplies the value
    assert echo["resolved"]["size"] == 16        # flag beats the file
    assert "18 videos, 3 classes" in capsys.readouterr().out


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("bogus = 1\n")
    assert dispatch(["gen-data", "--out", str(tmp_path / "ds"),
                     "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error[config]:") and "bogus" in err


def test_missing_config_file(tmp_path, capsys):
    assert dispatch(["gen-data", "--out", str(tmp_path / "ds"),
                     "--config", str(tmp_path / "none.cfg")]) == 2
    assert capsys.readouterr().err.startswith("error[io]:")


def test_parser_exit_codes(capsys):
    assert dispatch([]) == 2                     # a subcommand is required
    assert dispatch(["no-such-command"]) == 2
    assert dispatch(["--help"]) == 0
    assert dispatch(["finetune", "--help"]) == 0
    capsys.readouterr()
