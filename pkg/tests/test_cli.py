import json
import os
import subprocess
import sys

import pytest

from pedforecast.cli import (
    EXIT_FAILURE,
    EXIT_OK,
    EXIT_USAGE,
    dilation_schedule,
    draw_search_samples,
    main,
    spatial_schedule,
)
from pedforecast.config import SearchSpace, load_run_config, parse_run_config
from pedforecast.metrics import read_csv_rows
from pedforecast.model import ConfigError, ModelConfig, load_checkpoint
from pedforecast.scenes import read_dataset, read_pnm

TIMING = {"runtime_ms", "lookahead_ms", "lookahead_fraction", "train_seconds", "median_forward_ms", "step_ms"}


def run(*args):
    return main([str(a) for a in args])


def rows_without_timing(path):
    return [{k: v for k, v in r.items() if k not in TIMING} for r in read_csv_rows(path)]


@pytest.fixture(scope="module")
def trained(tiny_config, tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--config", tiny_config, "--data", tiny_data, "--out", out) == EXIT_OK
    return out


# --- generate --------------------------------------------------------------------

def test_generate_writes_dataset_and_resolved_config(tiny_data):
    ds = read_dataset(tiny_data)
    assert len(ds) == 10 * 3
    summary = json.loads((tiny_data / "summary.json").read_text())
    assert summary["clips"] == 30 and summary["videos_per_split"] == {"train": 6, "val": 1, "test": 3}
    resolved = load_run_config(tiny_data / "resolved_config.json")
    assert resolved.scene.n_videos == 10 and resolved.seed == 3


def test_generate_is_reproducible(tiny_config, tiny_data, tmp_path):
    assert run("generate", "--config", tiny_data / "resolved_config.json", "--out", tmp_path / "again") == EXIT_OK
    a = json.loads((tiny_data / "summary.json").read_text())["manifest_sha256"]
    b = json.loads((tmp_path / "again" / "summary.json").read_text())["manifest_sha256"]
    assert a == b
    assert run("generate", "--config", tiny_config, "--seed", 4, "--out", tmp_path / "other") == EXIT_OK
    c = json.loads((tmp_path / "other" / "summary.json").read_text())["manifest_sha256"]
    assert c != a


@pytest.mark.slow
def test_default_generate_has_1500_clips(tmp_path):
    assert run("generate", "--out", tmp_path / "d") == EXIT_OK
    summary = json.loads((tmp_path / "d" / "summary.json").read_text())
    assert summary == {**summary, "videos": 60, "clips": 60 * (40 - 2 * 8 + 1)}


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_output_is_a_usage_error(tmp_path, capsys):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    assert run("generate", "--out", locked / "x") == EXIT_USAGE
    assert "not writable" in capsys.readouterr().err


def test_output_that_is_a_file_is_a_usage_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("generate", "--out", blocker / "sub") == EXIT_USAGE
    assert "not writable" in capsys.readouterr().err


# --- config errors ------------------------------------------------------------------

def test_bad_configs_exit_with_usage(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,\n "scene": {"height": }}')
    assert run("generate", "--config", bad, "--out", tmp_path / "o") == EXIT_USAGE
    assert "bad.json:2:" in capsys.readouterr().err
    bad.write_text('{"scene": {"colour": 3}}')
    assert run("generate", "--config", bad, "--out", tmp_path / "o") == EXIT_USAGE
    assert "colour" in capsys.readouterr().err
    assert run("train", "--out", tmp_path / "o") == EXIT_USAGE
    with pytest.raises(SystemExit) as ex:
        run("train", "--variant", "v9")
    assert ex.value.code == EXIT_USAGE


def test_parse_rejects_unknown_and_conflicting_keys():
    with pytest.raises(ConfigError, match="config.train"):
        parse_run_config({"train": {"momentum": 1}})
    with pytest.raises(ConfigError, match="conflicts"):
        parse_run_config({"scene": {"height": 16}, "model": {"height": 32}})
    cfg = parse_run_config({"scene": {"height": 16, "width": 24}})
    assert (cfg.model.height, cfg.model.width) == (16, 24)
    assert cfg.train.lam == 0.5 == cfg.model.loss_weight


def test_mismatched_dataset_geometry(tiny_data, tmp_path, capsys):
    assert run("train", "--data", tiny_data, "--out", tmp_path) == EXIT_USAGE
    assert "geometry" in capsys.readouterr().err


# --- train / evaluate ----------------------------------------------------------------

def test_train_outputs(trained):
    for name in ("resolved_config.json", "train_log.csv", "loss_curves.png", "step_losses.png"):
        assert (trained / name).exists(), name
    assert (trained / "checkpoint" / "params.bin").exists()
    rows = read_csv_rows(trained / "train_log.csv")
    assert len(rows) == 1 and rows[0]["stage"] == "joint"
    cfg = load_run_config(trained / "resolved_config.json")
    assert cfg.train.strategy == "joint" and cfg.train.lam == 0.5


def test_train_is_bitwise_reproducible_from_resolved_config(trained, tmp_path):
    assert run("train", "--config", trained / "resolved_config.json", "--out", tmp_path) == EXIT_OK
    a = (trained / "checkpoint" / "params.bin").read_bytes()
    b = (tmp_path / "checkpoint" / "params.bin").read_bytes()
    assert a == b
    assert rows_without_timing(trained / "train_log.csv") == rows_without_timing(tmp_path / "train_log.csv")


def test_train_resume_flag(tiny_config, tiny_data, tmp_path):
    assert run("train", "--config", tiny_config, "--data", tiny_data, "--out", tmp_path) == EXIT_OK
    assert run("train", "--config", tiny_config, "--data", tiny_data, "--out", tmp_path, "--resume") == EXIT_OK
    assert len(read_csv_rows(tmp_path / "train_log.csv")) == 1


def test_separate_strategy_from_flag(tiny_config, tiny_data, tmp_path):
    assert run("train", "--config", tiny_config, "--data", tiny_data, "--out", tmp_path,
               "--strategy", "separate", "--variant", "v2") == EXIT_OK
    stages = [r["stage"] for r in read_csv_rows(tmp_path / "train_log.csv")]
    assert stages == ["separate-predictor", "separate-head"]


def test_joint_training_from_pretrained_predictor(trained, tiny_config, tiny_data, tmp_path):
    pre = tmp_path / "pre"
    assert run("train", "--config", tiny_config, "--data", tiny_data, "--out", pre, "--strategy", "pretrain") == EXIT_OK
    cfg = json.loads(tiny_config.read_text())
    cfg["train"]["lr"] = 0.0
    p = tmp_path / "frozen.json"
    p.write_text(json.dumps(cfg))
    assert run("train", "--config", p, "--data", tiny_data, "--out", tmp_path / "j",
               "--checkpoint", pre / "checkpoint") == EXIT_OK
    src, _ = load_checkpoint(pre / "checkpoint")
    got, _ = load_checkpoint(tmp_path / "j" / "checkpoint")
    a, b = src.encoder.state_dict(), got.encoder.state_dict()
    assert all((a[k] == b[k]).all() for k in a if "running" not in k and "initialized" not in k)
    assert run("train", "--config", tiny_config, "--data", tiny_data, "--out", tmp_path / "bad",
               "--checkpoint", tmp_path / "missing") == EXIT_USAGE


def test_evaluate_reports_and_frame_dumps(trained, tiny_data, tmp_path):
    assert run("evaluate", "--checkpoint", trained / "checkpoint", "--data", tiny_data, "--out", tmp_path,
               "--dump-frames", 2, "--config", trained / "resolved_config.json") == EXIT_OK
    row = read_csv_rows(tmp_path / "metrics.csv")[0]
    assert float(row["horizon_ms"]) == pytest.approx(100.0)
    assert float(row["lookahead_ms"]) <= 100.0
    curve = read_csv_rows(tmp_path / "per_frame_l1.csv")
    assert [int(r["frame"]) for r in curve] == [4, 5, 6]
    assert (tmp_path / "per_frame_l1.png").exists() and (tmp_path / "metrics.txt").exists()
    strips = sorted((tmp_path / "frames").iterdir())
    assert len(strips) == 2
    img = read_pnm(strips[0])
    assert img.shape == (1, 32, 48)


def test_evaluate_geometry_mismatch_shows_both_plans(trained, tmp_path, capsys):
    assert run("generate", "--out", tmp_path / "big", "--config", _scene_only(tmp_path)) == EXIT_OK
    assert run("evaluate", "--checkpoint", trained / "checkpoint", "--data", tmp_path / "big",
               "--out", tmp_path / "ev") == EXIT_USAGE
    err = capsys.readouterr().err
    assert "encoder.stem" in err and "[B, 1, 3, 24, 16]" in err


def _scene_only(tmp_path):
    p = tmp_path / "scene.json"
    p.write_text(json.dumps({"scene": {"n_videos": 1, "length": 6, "n_frames": 3, "height": 24, "width": 16}}))
    return p


def test_divergence_exit_code(tiny_config, tiny_data, tmp_path):
    cfg = json.loads(tiny_config.read_text())
    cfg["train"]["lr"] = 1e300
    p = tmp_path / "hot.json"
    p.write_text(json.dumps(cfg))
    assert run("train", "--config", p, "--data", tiny_data, "--out", tmp_path / "o") == EXIT_FAILURE
    assert (tmp_path / "o" / "DIVERGED").exists()


# --- ablate / search / benchmark ----------------------------------------------------------

def test_ablate_grid(tiny_config, tiny_data, tmp_path):
    assert run("ablate", "--config", tiny_config, "--data", tiny_data, "--out", tmp_path) == EXIT_OK
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "# schema=1" and len(lines) == 2 + 8
    rows = {r["variant"]: r for r in read_csv_rows(tmp_path / "ablation.csv")}
    assert list(rows) == ["ours", "v1", "v2", "v3", "v4", "v5", "v6", "v7"]
    assert all(r["status"] == "ok" for r in rows.values())
    assert int(rows["ours"]["flop_count"]) < int(rows["v1"]["flop_count"])
    assert int(rows["v4"]["param_count"]) < int(rows["ours"]["param_count"])
    assert (tmp_path / "ablation.png").exists()


def test_search_samples_stay_in_the_space():
    space = SearchSpace()
    events = []
    samples = draw_search_samples(0, space, 38, ModelConfig.desk(), events)
    assert len(samples) == 38
    for point, mc in samples:
        assert point["spatial_kernel"] in (3, 5, 7, 11)
        assert point["temporal_dilation"] in (1, 2, 3, 4)
        assert point["cell_kernel"] in (3, 5, 7)
        assert point["temporal_kernel"] in (2, 3, 4)
        assert point["cell_temporal_kernel"] in (2, 3, 4)
        assert mc.spatial_kernels[0] == point["spatial_kernel"]
        assert all(k in space.spatial_kernels for k in mc.spatial_kernels)
    again = draw_search_samples(0, space, 38, ModelConfig.desk())
    assert [p for p, _ in again] == [p for p, _ in samples]
    assert spatial_schedule(11, space) == (11, 7, 5, 3)
    assert spatial_schedule(3, space) == (3, 3, 3, 3)
    assert dilation_schedule(2) == (1, 2, 4)


def test_search_run(tiny_config, tiny_data, tmp_path):
    assert run("search", "--config", tiny_config, "--data", tiny_data, "--out", tmp_path) == EXIT_OK
    rows = read_csv_rows(tmp_path / "search.csv")
    assert len(rows) == 3 and [int(r["rank"]) for r in rows] == [1, 2, 3]
    l1 = [float(r["val_mean_l1"]) for r in rows]
    assert l1 == sorted(l1)
    best = json.loads((tmp_path / "best_config.json").read_text())
    top = rows[0]
    assert best["model"]["cell_kernel"] == int(top["cell_kernel"])
    assert best["model"]["spatial_kernels"][0] == int(top["spatial_kernel"])
    assert (tmp_path / "search.png").exists() and (tmp_path / "search_events.log").exists()


def test_benchmark(tiny_config, tmp_path):
    assert run("benchmark", "--config", tiny_config, "--out", tmp_path / "a") == EXIT_OK
    assert run("benchmark", "--config", tiny_config, "--out", tmp_path / "b") == EXIT_OK
    a = rows_without_timing(tmp_path / "a" / "benchmark.csv")
    assert a == rows_without_timing(tmp_path / "b" / "benchmark.csv")
    flops = {r["variant"]: int(r["flop_count"]) for r in a}
    assert flops["ours"] < flops["v2"] < flops["v1"]
    assert all(r["normative"] == "false" for r in a)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pedforecast", "benchmark", "--config", "/nonexistent.json",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "cannot read config" in proc.stderr
