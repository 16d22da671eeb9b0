import csv
import hashlib

import pytest

from dgpnet.cli import run
from dgpnet.config import read_config_file

FAST = ["--steps", "2", "--episodes", "3"]


def snapshot(d):
    return read_config_file(d / "config.toml")


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_unknown_command_and_flag_exit_2(capsys):
    assert run(["fly"]) == 2
    assert run(["train", "--no-such-flag"]) == 2
    assert run([]) == 2
    assert "usage" in capsys.readouterr().err


def test_validation_failure_is_one_line(tmp_path, capsys):
    assert run(["train", "--iterations", "9", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: validation:")


def test_missing_checkpoint(tmp_path, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path / "none.dgpn"), "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error: io:")


def test_five_way_defaults_to_higher_lr(tmp_path):
    assert run(["train", "--n-way", "5", "--k-shot", "1", "--steps", "1", "--out", str(tmp_path)]) == 0
    snap = snapshot(tmp_path)
    assert snap["lr"] == 0.01 and snap["model.lr"] == 0.01
    assert run(["train", "--steps", "1", "--out", str(tmp_path / "b")]) == 0
    assert snapshot(tmp_path / "b")["lr"] == 0.001


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("seed = 5\nsteps = 2\nk_shot = 1\nproto_mode = \"info\"\n")
    out = tmp_path / "o"
    assert run(["train", "--config", str(cfg), "--seed", "6", "--out", str(out)]) == 0
    snap = snapshot(out)
    assert (snap["seed"], snap["steps"], snap["k_shot"], snap["proto_mode"]) == (6, 2, 1, "info")
    with open(out / "train.jsonl") as fh:
        assert sum(1 for _ in fh) == 2
    # the snapshot replays the same run
    again = tmp_path / "again"
    assert run(["train", "--config", str(out / "config.toml"), "--out", str(again)]) == 0
    assert (again / "train.jsonl").read_bytes() == (out / "train.jsonl").read_bytes()


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("stepz = 3\n")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "stepz" in capsys.readouterr().err


def test_ablate_writes_five_rows(tmp_path):
    assert run(["ablate", "--k-shot", "1", *FAST, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert [r["variant"] for r in rows] == [
        "GCN", "GCN(dense)", "pro-point(only)", "GCN(dense)+pro_infor", "GCN(dense)+pro-point"]
    assert all(r["episodes"] == "3" for r in rows)
    assert len(list(tmp_path.glob("*.jsonl"))) == 5


def test_generated_data_round_trip_and_untouched(tmp_path):
    data = tmp_path / "data"
    assert run(["gen-data", "--samples-per-angle", "6", "--out", str(data)]) == 0
    manifest = data / "manifest.csv"
    assert manifest.exists()
    assert len(list(data.rglob("*.pgm"))) == 10 * 2 * 6
    before = tree_digest(data)
    train_dir, eval_dir = tmp_path / "t", tmp_path / "e"
    common = ["--data", str(manifest), "--k-shot", "1", *FAST]
    assert run(["train", *common, "--out", str(train_dir)]) == 0
    assert run(["eval", *common, "--checkpoint", str(train_dir / "model.dgpn"), "--out", str(eval_dir)]) == 0
    rows = list(csv.DictReader(open(eval_dir / "summary.csv")))
    assert rows[0]["episodes"] == "3"
    assert run(["export-embeddings", *common, "--checkpoint", str(train_dir / "model.dgpn"),
                "--stage", "embedding", "--out", str(eval_dir)]) == 0
    assert (eval_dir / "embeddings_embedding.csv").read_text().splitlines()[0].startswith("node")
    assert tree_digest(data) == before


def test_robustness_command(tmp_path):
    assert run(["robustness", "--k-shot", "1", "--steps", "1", "--runs", "3", "--run-episodes", "2",
                "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "robustness.csv")))
    assert len(rows) == 3 and list(rows[0]) == ["run", "acc_with_proto", "acc_without_proto"]


def test_gradcheck_command(tmp_path, capsys):
    assert run(["gradcheck", "--max-coords", "1", "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("max relative error")
    assert float(line.split()[-1]) < 1e-4
    rows = list(csv.DictReader(open(tmp_path / "gradcheck.csv")))
    assert rows[-1]["case"] == "model" and len(rows) > 20


@pytest.mark.parametrize("preset_name,size", [("paper", "32")])
def test_image_size_mismatch(tmp_path, capsys, preset_name, size):
    data = tmp_path / "d"
    assert run(["gen-data", "--samples-per-angle", "6", "--out", str(data)]) == 0
    assert run(["train", "--preset", preset_name, "--data", str(data / "manifest.csv"), "--steps", "1",
                "--out", str(tmp_path / "o")]) == 1
    assert f"{size}x{size}" in capsys.readouterr().err
