import csv
import json
import os

import pytest

from tfm.cli import RunConfig, default_schedule, main
from tfm.errors import ConfigError


def small_config(tmp_path, **kw):
    cfg = {"dataset": {"options": {"classes": 6, "dim": 16, "n": 60, "clusters_per_class": 2,
                                   "latent_dim": 4, "separation": 4.0}},
           "arch": {"input_shape": [16], "layers": [{"kind": "dense", "width": 24},
                                                    {"kind": "dense", "width": 24}]},
           "sequence": {"num_tasks": 3},
           "trainer": {"max_epochs": 8},
           "out": str(tmp_path / "run"), **kw}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_default_schedule():
    assert default_schedule(5) == [0.4, 0.15, 0.15, 0.15, 0.15]
    assert default_schedule(1) == [1.0]


def test_unknown_config_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"methd": "tfm"})
    with pytest.raises(ConfigError):
        RunConfig(trainer={"lr": 1}).resolve()
    with pytest.raises(ConfigError):
        RunConfig(arch="no-such-arch").resolve()


def test_resolve_is_a_fixed_point():
    cfg = RunConfig(seed=4).resolve()
    assert cfg.dataset["options"]["seed"] == 4 and cfg.trainer["seed"] == 4
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).resolve()
    assert again.to_dict() == cfg.to_dict()


def test_run_writes_the_run_directory(tmp_path, capsys):
    path = small_config(tmp_path)
    assert main(["run", "--config", path]) == 0
    out = tmp_path / "run"
    for name in ("config.json", "matrix.csv", "forgetting.csv", "summary.json", "growth.json",
                 "overhead.csv", "train_records/task_3.json", "snapshots/ckpt3.tfm"):
        assert (out / name).exists(), name
    rows = list(csv.reader((out / "matrix.csv").read_text().splitlines()))
    assert len(rows) == 4 and rows[0] == ["checkpoint", "task_1", "task_2", "task_3"]
    assert [sum(c != "" for c in r[1:]) for r in rows[1:]] == [1, 2, 3]
    assert "average accuracy" in capsys.readouterr().out
    assert not (out / "PARTIAL").exists()


def test_eval_matches_the_matrix(tmp_path, capsys):
    main(["run", "--config", small_config(tmp_path)])
    capsys.readouterr()
    snap = str(tmp_path / "run" / "snapshots" / "ckpt3")
    assert main(["eval", "--snapshot", snap, "--task", "2"]) == 0
    acc = float(capsys.readouterr().out)
    rows = list(csv.reader((tmp_path / "run" / "matrix.csv").read_text().splitlines()))
    assert acc == float(rows[3][2])
    assert main(["eval", "--snapshot", snap, "--task", "4"]) == 2


def test_rerun_from_written_config_is_identical(tmp_path):
    main(["run", "--config", small_config(tmp_path)])
    first = (tmp_path / "run" / "matrix.csv").read_bytes()
    snap = (tmp_path / "run" / "snapshots" / "ckpt2.tfm").read_bytes()
    written = str(tmp_path / "run" / "config.json")
    main(["run", "--config", written, "--out", str(tmp_path / "again")])
    assert (tmp_path / "again" / "matrix.csv").read_bytes() == first
    assert (tmp_path / "again" / "snapshots" / "ckpt2.tfm").read_bytes() == snap


def test_overhead_table(tmp_path, capsys):
    assert main(["overhead", "--tasks", "2", "--methods", "tfm,packnet"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "method,tasks,bytes"
    assert "tfm,2,4784" in lines
    target = tmp_path / "o.csv"
    assert main(["overhead", "--tasks", "1", "--out", str(target)]) == 0
    assert target.read_text().startswith("method,tasks,bytes")


def test_augment_check(tmp_path, capsys):
    assert main(["augment-check", "--config", small_config(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "task 3:" in out and "deterministic=True" in out


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    bad = small_config(tmp_path, method="guess")
    assert main(["run", "--config", bad]) == 2
    monkeypatch.setenv("TFM_LOG_LEVEL", "loud")
    assert main(["overhead"]) == 2
    monkeypatch.delenv("TFM_LOG_LEVEL")
    # more tasks than the 6 classes allow
    assert main(["run", "--config", small_config(tmp_path), "--tasks", "7"]) == 2
    assert "error" in capsys.readouterr().err


def test_failed_run_leaves_partial_marker(tmp_path):
    path = small_config(tmp_path)
    # samples are 8-dimensional, the architecture expects 16
    assert main(["run", "--config", path, "--dataset", "synth:classes=6,dim=8,n=20"]) == 3
    assert (tmp_path / "run" / "PARTIAL").exists()
    assert main(["run", "--config", path]) == 0
    assert not (tmp_path / "run" / "PARTIAL").exists()
