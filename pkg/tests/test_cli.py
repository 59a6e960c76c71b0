import hashlib
import json

import pytest
import torch
import yaml
from click.testing import CliRunner

from eesrdet.cli import EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME, main
from eesrdet.evaluation import EvalReport
from eesrdet.imaging import read_png, write_png
from eesrdet.synthdata import load_dataset


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "data": {"root": str(root / "data"), "n_tiles": 10, "hr_size": 32, "objects_per_tile": [1, 2],
                 "object_size": [4, 8], "fractions": [0.6, 0.2, 0.2]},
        "batch_size": 2, "max_steps": 3, "lr": 1e-3,
        "generator": {"n_blocks": 1, "base_channels": 8, "growth_channels": 4},
        "een": {"n_blocks": 1, "base_channels": 8, "growth_channels": 4},
        "discriminator": {"base_channels": 8, "image_size": 32},
        "detector": {"channels": 8}, "features": {"channels": [8]},
    }
    path = root / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    runner = CliRunner()
    res = runner.invoke(main, ["prepare-data", "--config", str(path), "--seed", "3"])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["train", "--config", str(path), "--run-dir", str(root / "run")])
    assert res.exit_code == 0, res.output
    return root, path


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_prepare_data_layout_and_refusal(workspace, tmp_path):
    root, cfg = workspace
    tiles, split = load_dataset(root / "data")
    assert len(tiles) == 10 and (len(split.train), len(split.val), len(split.test)) == (6, 2, 2)
    assert (root / "data" / "split.json").exists()
    assert run("prepare-data", "--config", cfg).exit_code == EXIT_DATA
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("prepare-data", "--config", cfg, "--seed", 5, "--out", a).exit_code == 0
    assert run("prepare-data", "--config", cfg, "--seed", 5, "--out", b).exit_code == 0
    assert tree_hash(a) == tree_hash(b)
    assert run("prepare-data", "--config", cfg, "--seed", 6, "--out", a, "--force").exit_code == 0
    assert tree_hash(a) != tree_hash(b)


def test_train_writes_log_and_checkpoint(workspace):
    root, _ = workspace
    lines = (root / "run" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["step"] == 0
    assert (root / "run" / "checkpoints" / "last.pt").exists()
    assert (root / "run" / "config.yaml").exists()


def test_train_config_errors(workspace, tmp_path):
    root, cfg = workspace
    res = run("train", "--config", cfg, "--run-dir", tmp_path / "r", "--mode", "sideways")
    assert res.exit_code == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**yaml.safe_load(cfg.read_text()), "mode": "sideways"}))
    res = run("train", "--config", bad, "--run-dir", tmp_path / "r")
    assert res.exit_code == EXIT_CONFIG and "mode" in res.output
    assert run("train", "--config", cfg, "--run-dir", root / "run").exit_code == EXIT_DATA
    res = run("train", "--config", cfg, "--run-dir", tmp_path / "r2", "--data", tmp_path / "nothing")
    assert res.exit_code == EXIT_DATA


def test_train_resume_continues(workspace, tmp_path):
    root, cfg = workspace
    assert run("train", "--config", cfg, "--run-dir", tmp_path / "full", "--max-steps", 4).exit_code == 0
    assert run("train", "--config", cfg, "--run-dir", tmp_path / "part", "--max-steps", 2).exit_code == 0
    assert run("train", "--config", cfg, "--run-dir", tmp_path / "part", "--max-steps", 4,
               "--resume").exit_code == 0
    assert (tmp_path / "full" / "train_log.jsonl").read_text() == (tmp_path / "part" / "train_log.jsonl").read_text()


def test_train_backend_and_mode_flags(workspace, tmp_path):
    _, cfg = workspace
    res = run("train", "--config", cfg, "--run-dir", tmp_path / "t", "--backend", "two_stage", "--mode",
              "end_to_end", "--max-steps", 1)
    assert res.exit_code == 0, res.output
    saved = yaml.safe_load((tmp_path / "t" / "config.yaml").read_text())
    assert saved["mode"] == "end_to_end" and saved["detector"]["backend"] == "two_stage"


def test_evaluate_checkpoint_and_inputs(workspace, tmp_path):
    root, _ = workspace
    for kind in ("sr", "bicubic", "hr"):
        out = tmp_path / f"{kind}.json"
        res = run("evaluate", "--run-dir", root / "run", "--input", kind, "--out", out)
        assert res.exit_code == 0, res.output
        rep = EvalReport.load(out)
        assert rep.label == kind and len(rep.ap) == 10
        for c in rep.counts:
            assert c["tp"] + c["fn"] == rep.n_gt
        assert rep.extra["train_size"] == 6


def test_evaluate_perfect_detections(workspace, tmp_path):
    root, _ = workspace
    tiles, split = load_dataset(root / "data")
    lines = []
    for tid in split.test:
        for b in tiles[tid].boxes:
            lines.append(f"{tid} 0 0.9 {b.x_min} {b.y_min} {b.x_max} {b.y_max}")
    dets = tmp_path / "perfect.txt"
    dets.write_text("\n".join(lines) + "\n")
    out = tmp_path / "p.json"
    res = run("evaluate", "--data", root / "data", "--detections", dets, "--out", out)
    assert res.exit_code == 0, res.output
    assert EvalReport.load(out).ap == [1.0] * 10


def test_evaluate_missing_checkpoint(workspace, tmp_path):
    root, _ = workspace
    res = run("evaluate", "--checkpoint", tmp_path / "none.pt", "--data", root / "data")
    assert res.exit_code == EXIT_RUNTIME and "does not exist" in res.output


@pytest.mark.parametrize("size", [(16, 16), (13, 10)])
def test_infer_outputs(workspace, tmp_path, size):
    root, _ = workspace
    img = tmp_path / "lr.png"
    write_png(img, torch.rand(3, *size))
    res = run("infer", "--run-dir", root / "run", img, "--out-dir", tmp_path / "o", "--score-thresh", 0.0)
    assert res.exit_code == 0, res.output
    sr = read_png(tmp_path / "o" / "lr_sr.png")
    assert sr.shape == (3, size[0] * 4, size[1] * 4)
    assert read_png(tmp_path / "o" / "lr_edges.png").shape == sr.shape
    assert (tmp_path / "o" / "lr_detections.png").exists()
    for line in (tmp_path / "o" / "lr_detections.txt").read_text().splitlines():
        tid, cls, conf, *coords = line.split()
        assert tid == "lr" and cls == "0" and 0 <= float(conf) <= 1 and len(coords) == 4
        assert float(coords[2]) <= size[1] * 4 and float(coords[3]) <= size[0] * 4


def test_plot_emits_curves(workspace, tmp_path):
    root, _ = workspace
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run("evaluate", "--run-dir", root / "run", "--input", "sr", "--out", a)
    run("evaluate", "--run-dir", root / "run", "--input", "bicubic", "--out", b)
    res = run("plot", a, "--out-dir", tmp_path / "one")
    assert res.exit_code == 0, res.output
    assert sorted(p.name for p in (tmp_path / "one").iterdir()) == ["ap_iou.csv", "dataset_size.csv", "pr_sr.csv"]
    assert run("plot", a, b, "--out-dir", tmp_path / "p").exit_code == 0
    rows = (tmp_path / "p" / "ap_iou.csv").read_text().splitlines()
    assert rows[0] == "tau,sr,bicubic" and len(rows) == 11
    rep = EvalReport.load(a)
    assert [float(r.split(",")[1]) for r in rows[1:]] == rep.ap
    # a report on a different IoU grid is rejected
    data = json.loads(a.read_text())
    data["thresholds"] = data["thresholds"][:5]
    data["ap"] = data["ap"][:5]
    c = tmp_path / "c.json"
    c.write_text(json.dumps(data))
    assert run("plot", a, c, "--out-dir", tmp_path / "q").exit_code == EXIT_CONFIG
