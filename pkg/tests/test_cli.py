import json

import pytest

from mcloss.cli import main

TINY = {"epochs": 2, "schedule": [1], "batch_size": 8, "widths": [4, 6],
        "data": {"n_train": 24, "n_test": 16}}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def test_assign_table2(capsys):
    assert main(["assign", "--channels", "512", "--classes", "200"]) == 0
    assert capsys.readouterr().out.strip() == "88 classes ×2, 112 classes ×3"


def test_assign_ranges(capsys):
    assert main(["assign", "--channels", "7", "--classes", "3", "--ranges"]) == 0
    out = capsys.readouterr().out
    assert "class 0: channels [0, 2)" in out and "class 2: channels [4, 7)" in out


def test_assign_invalid_is_exit_1(capsys):
    assert main(["assign", "--channels", "2", "--classes", "3"]) == 1


def test_unknown_flag_is_exit_1(capsys):
    assert main(["assign", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_is_exit_1(capsys):
    assert main(["frobnicate"]) == 1


def test_gradcheck(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
    assert out.count(" ok") == 11


def test_train_missing_config(capsys):
    assert main(["train", "--config", "missing.json"]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_train_invalid_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lr0": -1}))
    assert main(["train", "--config", str(bad)]) == 1


def test_numerical_failure_is_exit_2(tmp_path, capsys):
    cfg = tmp_path / "div.json"
    cfg.write_text(json.dumps({**TINY, "lr0": 1e6, "batch_norm": False}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "runs")]) == 2


def test_end_to_end(tmp_path, config_file, capsys, monkeypatch):
    data = tmp_path / "data"
    runs = tmp_path / "runs"
    assert main(["synth", "--out", str(data), "--n-train", "24", "--n-test", "16"]) == 0
    assert (data / "spec.json").is_file() and (data / "train" / "images.mct").is_file()

    assert main(["train", "--config", str(config_file), "--data", str(data), "--out", str(runs)]) == 0
    run_dirs = [p for p in runs.iterdir() if p.is_dir()]
    assert len(run_dirs) == 1
    run = run_dirs[0]
    header = (run / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,split,acc,l_ce,l_dis,l_div,l_total"
    manifest = json.loads((run / "checkpoint" / "manifest.json").read_text())
    assert {"name", "shape", "offset"} <= set(manifest["tensors"][0])

    capsys.readouterr()
    assert main(["eval", "--run", str(run), "--data", str(data)]) == 0
    assert "test acc" in capsys.readouterr().out

    assert main(["heatmaps", "--run", str(run), "--samples", "2", "--out", str(tmp_path / "maps")]) == 0
    pgms = sorted((tmp_path / "maps").glob("*.pgm"))
    assert len(pgms) == 2 * 4 and pgms[0].read_bytes()[:2] == b"P5"

    monkeypatch.setenv("MC_SEED", "5")
    assert main(["train", "--config", str(config_file), "--data", str(data), "--out", str(runs)]) == 0
    assert len([p for p in runs.iterdir() if p.is_dir()]) == 2

    assert main(["report", "--runs", str(runs)]) == 0
    report = runs / "report"
    assert (report / "summary.csv").is_file()
    assert (report / "final_accuracy.png").read_bytes()[:4] == b"\x89PNG"
    assert (report / "accuracy_curves.png").is_file()


def test_ablate(tmp_path, config_file, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(config_file), "--arms", "ce,mc", "--seeds", "0",
                 "--out", str(out)]) == 0
    text = (out / "ablation.csv").read_text()
    assert text.startswith("arm,seed,final_test_acc")
    assert main(["report", "--runs", str(out)]) == 0
    summary = (out / "report" / "summary.csv").read_text()
    assert ",ce," in summary and ",mc," in summary


def test_ablate_unknown_arm(config_file, tmp_path):
    assert main(["ablate", "--config", str(config_file), "--arms", "nope", "--out", str(tmp_path)]) == 1


def test_report_without_runs(tmp_path):
    assert main(["report", "--runs", str(tmp_path)]) == 1
