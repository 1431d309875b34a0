import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from contrimix.cli import run_command

TINY_DATA = ["--n-train", "48", "--n-val", "16", "--n-test", "16", "--height", "16", "--width", "16"]
TINY_TRAIN = [
    "--epochs", "1", "--batch-size", "16", "--num-mixes", "1", "--content-width", "2", "--content-blocks", "1",
    "--attr-width", "2", "--attr-stages", "2", "--backbone-widths", "4,4", "--backbone-groups", "2", "--threads", "1",
]


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_command(["gen-data", "--seed", "7", "--out", str(root / "data"), *TINY_DATA]) == 0
    assert run_command(["train", "--data", str(root / "data"), "--out", str(root / "run"), *TINY_TRAIN]) == 0
    return root


def test_gen_data_byte_identical(tmp_path):
    for name in ("d1", "d2"):
        assert run_command(["gen-data", "--seed", "7", "--out", str(tmp_path / name), *TINY_DATA]) == 0
    a, b = tree(tmp_path / "d1"), tree(tmp_path / "d2")
    assert a and a == b


def test_gen_data_seed_changes_output(tmp_path):
    run_command(["gen-data", "--seed", "7", "--out", str(tmp_path / "a"), *TINY_DATA])
    run_command(["gen-data", "--seed", "8", "--out", str(tmp_path / "b"), *TINY_DATA])
    assert tree(tmp_path / "a") != tree(tmp_path / "b")


def test_seed_env_fallback(tmp_path, monkeypatch):
    run_command(["gen-data", "--seed", "7", "--out", str(tmp_path / "flag"), *TINY_DATA])
    monkeypatch.setenv("CONTRIMIX_SEED", "7")
    run_command(["gen-data", "--out", str(tmp_path / "env"), *TINY_DATA])
    assert tree(tmp_path / "flag") == tree(tmp_path / "env")
    monkeypatch.setenv("CONTRIMIX_SEED", "seven")
    assert run_command(["gen-data", "--out", str(tmp_path / "bad"), *TINY_DATA]) == 1


def test_unknown_flag_suggests(capsys, tmp_path):
    code = run_command(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--lrr", "0.1"])
    assert code == 1
    assert "did you mean --lr?" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path):
    assert run_command([]) == 1
    assert run_command(["fly"]) == 1
    assert run_command(["train", "--out", str(tmp_path)]) == 1
    assert run_command(["gen-data", "--out", str(tmp_path), "--n-train", "many"]) == 1


def test_missing_dataset_is_runtime_error(tmp_path):
    code = run_command(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), *TINY_TRAIN])
    assert code == 2
    assert not (tmp_path / "o").exists()


def test_train_writes_run_directory(workspace):
    run = workspace / "run"
    manifest = json.loads((run / "config.json").read_text())
    assert manifest["config"]["epochs"] == 1 and manifest["config"]["num_mixes"] == 1
    assert {"config_hash", "dataset_hash", "tool_version"} <= set(manifest)
    assert (run / "checkpoints" / "best.ctmx").is_file()


def test_equal_manifests_equal_metrics(workspace, tmp_path):
    again = tmp_path / "again"
    assert run_command(["train", "--data", str(workspace / "data"), "--out", str(again), *TINY_TRAIN]) == 0
    assert (again / "metrics.csv").read_bytes() == (workspace / "run" / "metrics.csv").read_bytes()
    a = json.loads((again / "config.json").read_text())
    b = json.loads((workspace / "run" / "config.json").read_text())
    assert a["config_hash"] == b["config_hash"]


def test_config_file_with_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[train]\nepochs = 1\nlr = 0.005\nnum_mixes = 3\n", encoding="utf-8")
    out = tmp_path / "o"
    code = run_command(
        ["train", "--data", str(workspace / "data"), "--out", str(out), "--config", str(cfg), *TINY_TRAIN]
    )
    assert code == 0
    resolved = json.loads((out / "config.json").read_text())["config"]
    assert resolved["lr"] == 0.005 and resolved["num_mixes"] == 1


def test_train_erm(workspace, tmp_path):
    assert run_command(["train-erm", "--data", str(workspace / "data"), "--out", str(tmp_path / "e"), *TINY_TRAIN]) == 0
    resolved = json.loads((tmp_path / "e" / "config.json").read_text())["config"]
    assert resolved["lam"] == 1.0 and resolved["num_mixes"] == 0


def test_eval_outputs(workspace, tmp_path, capsys):
    ckpt = workspace / "run" / "checkpoints" / "best.ctmx"
    code = run_command(
        ["eval", "--checkpoint", str(ckpt), "--data", str(workspace / "data"), "--out", str(tmp_path), "--probe-per-cell", "4"]
    )
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["split"] == "test_ood" and 0 <= report["accuracy"] <= 1
    assert report["attribute_probe"] is not None
    rows = list(csv.reader(open(tmp_path / "embedding_attribute.csv", encoding="utf-8")))
    assert rows[0] == ["x", "y", "domain_id", "split"] and len(rows) == 17
    assert "accuracy" in capsys.readouterr().out


def test_missing_checkpoint_is_runtime_error(workspace, tmp_path):
    code = run_command(["eval", "--checkpoint", str(tmp_path / "x.ctmx"), "--data", str(workspace / "data"), "--out", str(tmp_path)])
    assert code == 2


def test_render_commands(workspace, tmp_path):
    ckpt = str(workspace / "run" / "checkpoints" / "best.ctmx")
    data = str(workspace / "data")
    assert run_command(["render-grid", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path), "--count", "2"]) == 0
    assert (tmp_path / "mix_grid.ppm").read_bytes().startswith(b"P6")
    assert run_command(["render-content", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path), "--indices", "0,1"]) == 0
    assert (tmp_path / "content_channels.ppm").is_file()
    bad = ["render-content", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path), "--indices", "999"]
    assert run_command(bad) == 1


def test_ablate_five_settings(workspace, tmp_path, capsys):
    code = run_command(
        ["ablate", "--data", str(workspace / "data"), "--out", str(tmp_path), "--axis", "mixes", "--values", "1,2,3,4,5", *TINY_TRAIN]
    )
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv", encoding="utf-8")))
    assert sorted({r["setting"] for r in rows}) == ["1", "2", "3", "4", "5"]
    assert "Test Accuracy (%)" in capsys.readouterr().out


def test_ablate_unknown_axis(workspace, tmp_path):
    assert run_command(["ablate", "--data", str(workspace / "data"), "--out", str(tmp_path), "--axis", "depth"]) == 1


def test_gradcheck_single_seed(tmp_path, capsys):
    assert run_command(["gradcheck", "--num-seeds", "1", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "all" in out and "rtol 0.001" in out
    rows = list(csv.DictReader(open(tmp_path / "gradcheck.csv", encoding="utf-8")))
    assert rows and all(r["passed"] == "1" for r in rows)


def test_nothing_written_outside_out(tmp_path):
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    out = tmp_path / "out"
    env = {**os.environ, "CONTRIMIX_SEED": "3"}
    steps = [
        ["gen-data", "--out", str(out / "data"), *TINY_DATA],
        ["train", "--data", str(out / "data"), "--out", str(out / "run"), *TINY_TRAIN],
    ]
    for argv in steps:
        subprocess.run([sys.executable, "-m", "contrimix", *argv], cwd=cwd, env=env, check=True, capture_output=True)
    assert list(cwd.iterdir()) == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cwd", "out"]
    assert sorted(p.name for p in out.iterdir()) == ["data", "run"]


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "contrimix", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
