import csv
import json
import subprocess
import sys

import pytest

from unilion import cli
from unilion.pipeline import FrameResult

TINY = dict(grid_origin=[-6.4, -6.4, -3.0], grid_extent=[32, 32, 32], channels=8, feature_channels=8,
            windows=[[8, 8, 32]], group_sizes=[64], chunk=16, num_boxes=2, box_area=5.0,
            ground_points=200, box_points=40, image_size=[4, 6], depth_bins=8, frames=2,
            lengths=[64, 128], bench_repeats=1, bench_channels=4, gradcheck_directions=8)


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_writes_frames_and_honors_seed(config, tmp_path):
    assert run("gen", "--config", config, "--out", tmp_path / "a", "--seed", 1) == 0
    assert run("gen", "--config", config, "--out", tmp_path / "b", "--seed", 1) == 0
    assert run("gen", "--config", config, "--out", tmp_path / "c", "--seed", 2) == 0
    a = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert a == ["frame_000.json", "frame_001.json"]
    text = lambda d: (tmp_path / d / "frame_000.json").read_text()  # noqa: E731
    assert text("a") == text("b") != text("c")


def test_gen_zero_frames_writes_nothing(config, tmp_path):
    assert run("gen", "--config", config, "--out", tmp_path / "o", "--frames", 0) == 0
    assert list((tmp_path / "o").iterdir()) == []


def test_forward_on_generated_scenes(config, tmp_path):
    run("gen", "--config", config, "--out", tmp_path / "s")
    assert run("forward", "--config", config, "--out", tmp_path / "f", "--scenes", tmp_path / "s",
               "--regime", "L") == 0
    report = json.loads((tmp_path / "f" / "report.json").read_text())
    assert report["ok"] and report["regime"] == "L" and report["configured"] == "LCT"
    bev = json.loads((tmp_path / "f" / "bev_001.json").read_text())
    assert bev["shape"] == [32, 32, 8]


def test_forward_invariant_failure_exits_one(config, tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_sequence", lambda *a, **k: [FrameResult(None, 0, [], ["boom"])])
    assert run("forward", "--config", config, "--out", tmp_path) == 1
    assert json.loads((tmp_path / "report.json").read_text())["ok"] is False


def test_missing_inputs_exit_two(config, tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("forward", "--config", config, "--out", tmp_path / "f", "--scenes", tmp_path / "empty") == 2
    assert run("forward", "--config", tmp_path / "nope.json", "--out", tmp_path / "f") == 2
    assert run("forward", "--config", config, "--out", tmp_path / "f", "--checkpoint", tmp_path / "x.npz") == 2
    (tmp_path / "empty" / "frame_000.json").write_text("{}")
    assert run("forward", "--config", config, "--out", tmp_path / "f", "--scenes", tmp_path / "empty") == 2


def test_bad_config_exits_two(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"operator": "lstm"}))
    assert run("gen", "--config", p, "--out", tmp_path) == 2
    p.write_text("{")
    assert run("gen", "--config", p, "--out", tmp_path) == 2


@pytest.mark.parametrize("value,code", [("abc", 2), ("0", 2), ("1", 0)])
def test_thread_env(config, tmp_path, monkeypatch, value, code):
    monkeypatch.setenv(cli.THREADS_ENV, value)
    assert run("gen", "--config", config, "--out", tmp_path, "--frames", 1) == code


def test_gradcheck_report(config, tmp_path):
    assert run("gradcheck", "--config", config, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "gradient_report.json").read_text())
    assert doc["passed"] and doc["op_tolerance"] == 1e-6
    assert {r["label"] for r in doc["ops"]} >= {"gelu", "selective_scan_chunked", "wkv_scan"}
    assert doc["end_to_end"]["max_error"] <= 1e-4


def test_bench_outputs(config, tmp_path):
    assert run("bench", "--config", config, "--out", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
    assert [r["T"] for r in rows] == ["64", "64", "128", "128"]
    assert (tmp_path / "bench.png").read_bytes()[:4] == b"\x89PNG"


def test_train_outputs_and_checkpoint(config, tmp_path):
    assert run("train", "--config", config, "--out", tmp_path / "t", "--steps", 2) == 0
    lines = (tmp_path / "t" / "losses.jsonl").read_text().splitlines()
    assert [json.loads(s)["step"] for s in lines] == [0, 1]
    assert (tmp_path / "t" / "loss_curve.png").exists()
    assert run("forward", "--config", config, "--out", tmp_path / "f",
               "--checkpoint", tmp_path / "t" / "checkpoint.npz") == 0
    assert not [p for p in (tmp_path / "t").iterdir() if p.name.startswith(".")]


def test_module_entry_point(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "unilion", "gen", "--config", str(config),
                           "--out", str(tmp_path), "--frames", "1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    bad = subprocess.run([sys.executable, "-m", "unilion", "gen", "--config", str(tmp_path / "x.json")],
                         capture_output=True, text=True)
    assert bad.returncode == 2 and "cannot read config" in bad.stderr
