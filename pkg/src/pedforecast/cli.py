"""Command-line entry point: generate | train | evaluate | ablate | search | benchmark."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import plots
from .autodiff import NonFiniteError, Tensor, no_grad
from .config import RESOLVED_NAME, RunConfig, SearchSpace, load_run_config, parse_run_config
from .metrics import SCHEMA_LINE
from .model import (
    VARIANT_LABELS,
    ConfigError,
    ModelConfig,
    PredictionModel,
    VariantId,
    build_variant,
    load_checkpoint,
    save_checkpoint,
    shape_plan,
)
from .scenes import DatasetError, SceneDataset, dump_strip, generate_dataset, read_dataset, write_dataset
from .training import Trainer, TrainingDiverged, evaluate, predict_split, report_from_predictions

log = logging.getLogger("pedforecast")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments, configuration or inputs (exit code 2)."""


# --- helpers -------------------------------------------------------------

def write_csv(path, header: Sequence[str], rows: Sequence[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def _prepare_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("no output directory: pass --out DIR or set \"out\" in the config")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise UsageError(f"output directory {out} is not writable ({err.strerror})") from None
    cfg.write(out)
    return out


def _dataset(cfg: RunConfig) -> SceneDataset:
    if not cfg.data:
        raise UsageError("no dataset: pass --data DIR (created by 'generate') or set \"data\" in the config")
    try:
        ds = read_dataset(cfg.data)
    except FileNotFoundError as err:
        raise UsageError(f"dataset {cfg.data}: {err}") from None
    scene = ds.config
    m = cfg.model
    if (scene.n_frames, scene.channels, scene.height, scene.width) != (m.n_frames, m.input_channels, m.height, m.width):
        raise UsageError(f"dataset geometry N={scene.n_frames} C={scene.channels} {scene.height}x{scene.width} "
                         f"does not match the model config; generate the dataset with the same scene settings")
    return ds


def _model(model_cfg: ModelConfig, cfg: RunConfig) -> PredictionModel:
    return PredictionModel(model_cfg, dtype=cfg.train.dtype, seed=cfg.seed)


def _progress(msg: str) -> None:
    log.info(msg)


def _train_and_eval(model_cfg: ModelConfig, cfg: RunConfig, ds: SceneDataset, split: str,
                    out_dir: Optional[Path] = None, train_cfg=None, max_clips=None):
    model = _model(model_cfg, cfg)
    trainer = Trainer(model, ds, train_cfg or cfg.train, out_dir=out_dir, progress=_progress)
    trainer.run()
    recs = ds.records(split)
    cap = max_clips if max_clips is not None else cfg.evaluate.max_clips
    if cap is not None and len(recs) > cap:
        idx = np.linspace(0, len(recs) - 1, cap).round().astype(int)
        recs = [recs[i] for i in idx]
    preds, runtime = predict_split(model, ds, recs, cfg.evaluate.batch_size)
    return model, trainer.log, report_from_predictions(model, preds, ds.config.fps, runtime)


# --- commands ------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    ds = generate_dataset(cfg.scene, cfg.seed)
    write_dataset(ds, out)
    manifest = (out / "manifest.txt").read_bytes()
    split = ds.split()
    summary = {
        "videos": len(ds.videos), "clips": len(ds.clips),
        "manifest_sha256": hashlib.sha256(manifest).hexdigest(),
        "videos_per_split": {"train": len(split.train), "val": len(split.val), "test": len(split.test)},
        "crossing_clips_per_split": split.crossing_counts,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {summary['clips']} clips from {summary['videos']} videos to {out}")
    return EXIT_OK


def _init_predictor(model: PredictionModel, ckpt) -> None:
    """Copy encoder and decoder weights (not the action head) from a checkpoint."""
    try:
        src, _ = load_checkpoint(ckpt)
    except FileNotFoundError as err:
        raise UsageError(f"checkpoint {ckpt}: {err}") from None
    mine = model.config
    head_only = {"head_channels": mine.head_channels, "head_kernel": mine.head_kernel, "loss_weight": mine.loss_weight}
    if dataclasses.replace(src.config, **head_only) != mine:
        raise UsageError(f"checkpoint {ckpt} was trained with a different predictor configuration")
    model.encoder.load_state_dict(src.encoder.state_dict())
    model.decoder.load_state_dict(src.decoder.state_dict())
    log.info("predictor initialised from %s", ckpt)


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    out = _prepare_out(cfg)
    ds = _dataset(cfg)
    model = _model(cfg.model_config(), cfg)
    if cfg.checkpoint:
        _init_predictor(model, cfg.checkpoint)
    trainer = Trainer(model, ds, cfg.train, out_dir=out, resume=resume, progress=_progress)
    trainer.run()
    if not (out / "checkpoint" / "config.json").exists():
        save_checkpoint(model, out / "checkpoint")
    plots.loss_curves(out / "loss_curves.png", trainer.log.rows)
    if trainer.log.step_losses:
        plots.step_losses(out / "step_losses.png", trainer.log.step_losses)
    print(f"trained {cfg.variant} ({cfg.train.strategy}) for {len(trainer.log.rows)} epochs; outputs in {out}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    ckpt = cfg.checkpoint
    if not ckpt:
        raise UsageError("no checkpoint: pass --checkpoint DIR or set \"checkpoint\" in the config")
    try:
        model, _ = load_checkpoint(ckpt)
    except FileNotFoundError as err:
        raise UsageError(f"checkpoint {ckpt}: {err}") from None
    ds = read_dataset(cfg.data) if cfg.data else None
    if ds is None:
        raise UsageError("no dataset: pass --data DIR or set \"data\" in the config")
    sc, mc = ds.config, model.config
    if (sc.n_frames, sc.channels, sc.height, sc.width) != (mc.n_frames, mc.input_channels, mc.height, mc.width):
        data_plan = f"[B, {sc.channels}, {sc.n_frames}, {sc.height}, {sc.width}]"
        model_plan = "; ".join(f"{l.name}={l.out_shape}" for l in shape_plan(mc, 1).layers[:3])
        raise UsageError(f"checkpoint expects input [B, {mc.input_channels}, {mc.n_frames}, {mc.height}, "
                         f"{mc.width}] ({model_plan}, ...) but dataset clips are {data_plan}")
    ev = cfg.evaluate
    recs = ds.records(ev.split)
    if ev.max_clips is not None and len(recs) > ev.max_clips:
        idx = np.linspace(0, len(recs) - 1, ev.max_clips).round().astype(int)
        recs = [recs[i] for i in idx]
    preds, runtime = predict_split(model, ds, recs, ev.batch_size)
    report = report_from_predictions(model, preds, sc.fps, runtime)
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    write_csv(out / "per_frame_l1.csv", ["frame", "l1"],
              [{"frame": sc.n_frames + t + 1, "l1": v} for t, v in enumerate(report.per_frame_l1)])
    plots.per_frame_curve(out / "per_frame_l1.png", report.per_frame_l1, sc.n_frames)
    if ev.dump_frames > 0:
        d = out / "frames"
        d.mkdir(exist_ok=True)
        ext = "pgm" if sc.channels == 1 else "ppm"
        for i in range(min(ev.dump_frames, len(preds.clip_ids))):
            dump_strip(d / f"{preds.clip_ids[i]}.{ext}", preds.truth[i], preds.frames[i])
    print(f"mean L1 {report.mean_l1:.5f}  SSIM {report.mean_ssim:.4f}  AP {report.ap:.4f} "
          f"(chance {report.chance_ap:.4f})  look-ahead {report.lookahead_ms:.1f} ms")
    return EXIT_OK


ABLATION_HEADER = ("variant", "label", "status", "mean_l1", "mean_ssim", "ap", "param_count", "flop_count",
                   "runtime_ms", "train_seconds", "error")


def cmd_ablate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    ds = _dataset(cfg)
    rows = []
    for v in VariantId:
        row = {"variant": v.value, "label": VARIANT_LABELS[v], "status": "ok", "error": ""}
        t0 = time.perf_counter()
        try:
            mc = build_variant(v, cfg.model)
            model, _, rep = _train_and_eval(mc, cfg, ds, cfg.evaluate.split)
            row.update(mean_l1=rep.mean_l1, mean_ssim=rep.mean_ssim, ap=rep.ap, param_count=rep.param_count,
                       flop_count=rep.flop_count, runtime_ms=rep.runtime_ms)
        except (ArithmeticError, RuntimeError, ValueError) as err:
            row.update(status="failed", error=f"{type(err).__name__}: {err}")
            log.warning("variant %s failed: %s", v.value, err)
        row["train_seconds"] = time.perf_counter() - t0
        rows.append(row)
        _progress(f"ablation {v.value}: {row['status']}")
    write_csv(out / "ablation.csv", ABLATION_HEADER, rows)
    plots.ablation_bars(out / "ablation.png", rows)
    print(f"wrote {len(rows)} ablation rows to {out / 'ablation.csv'}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_FAILURE


def spatial_schedule(first: int, space: SearchSpace) -> tuple:
    """Non-increasing kernel schedule over the four encoder levels starting at ``first``."""
    sizes = sorted((k for k in space.spatial_kernels if k <= first), reverse=True)
    sched = (sizes + [sizes[-1]] * 4)[:4]
    return tuple(sched)


def dilation_schedule(rate: int) -> tuple:
    return (1, rate, rate * rate)


def sample_search_point(rng: np.random.Generator, space: SearchSpace) -> dict:
    """One uniform, independent draw per search dimension."""
    def pick(values):
        return int(values[int(rng.integers(len(values)))])
    return {
        "spatial_kernel": pick(space.spatial_kernels),
        "temporal_dilation": pick(space.temporal_dilations),
        "cell_kernel": pick(space.cell_kernels),
        "temporal_kernel": pick(space.temporal_kernels),
        "cell_temporal_kernel": pick(space.cell_temporal_kernels),
    }


def point_to_model(point: dict, base: ModelConfig, space: SearchSpace) -> ModelConfig:
    return dataclasses.replace(
        base,
        spatial_kernels=spatial_schedule(point["spatial_kernel"], space),
        dilations=dilation_schedule(point["temporal_dilation"]),
        cell_kernel=point["cell_kernel"],
        temporal_kernel=point["temporal_kernel"],
        cell_temporal_kernel=point["cell_temporal_kernel"],
    )


def draw_search_samples(seed: int, space: SearchSpace, budget: int, base: ModelConfig,
                        events: Optional[list] = None, max_tries: int = 1000) -> list[tuple[dict, ModelConfig]]:
    """``budget`` feasible samples; infeasible draws are logged to ``events`` and redrawn."""
    rng = np.random.default_rng([seed, 38])
    out = []
    tries = 0
    while len(out) < budget:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not draw {budget} feasible configurations in {max_tries} tries")
        point = sample_search_point(rng, space)
        try:
            mc = point_to_model(point, base, space)
            shape_plan(mc, 1)
        except (ConfigError, ValueError) as err:
            if events is not None:
                events.append(f"resampled infeasible draw {point}: {err}")
            continue
        out.append((point, mc))
    return out


SEARCH_KEYS = ("spatial_kernel", "temporal_dilation", "cell_kernel", "temporal_kernel", "cell_temporal_kernel")
SEARCH_HEADER = ("rank", "sample") + SEARCH_KEYS + ("status", "val_mean_l1", "param_count", "flop_count",
                                                   "train_seconds", "error")


def cmd_search(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    ds = _dataset(cfg)
    s = cfg.search
    events: list[str] = []
    samples = draw_search_samples(cfg.seed, s.space, s.budget, cfg.model, events)
    for e in events:
        log.info(e)
    steps = s.steps
    epochs = max(1, math.ceil(steps / 100)) if steps else 1
    per_epoch = max(1, math.ceil(steps / epochs)) if steps else 0
    train_cfg = dataclasses.replace(cfg.train, strategy="pretrain", epochs=epochs, steps_per_epoch=per_epoch,
                                    max_eval_clips=s.max_eval_clips)
    rows = []
    for i, (point, mc) in enumerate(samples):
        row = {"sample": i, **point, "status": "ok", "error": ""}
        t0 = time.perf_counter()
        try:
            _, _, rep = _train_and_eval(mc, cfg, ds, "val", train_cfg=train_cfg, max_clips=s.max_eval_clips)
            row.update(val_mean_l1=rep.mean_l1, param_count=rep.param_count, flop_count=rep.flop_count)
        except (ArithmeticError, RuntimeError, ValueError) as err:
            row.update(status="failed", val_mean_l1=math.inf, error=f"{type(err).__name__}: {err}")
        row["train_seconds"] = time.perf_counter() - t0
        rows.append(row)
        _progress(f"search sample {i + 1}/{len(samples)}: {row['status']} val L1 {row['val_mean_l1']}")
    ranked = sorted(rows, key=lambda r: (r["val_mean_l1"], r["sample"]))
    for rank, r in enumerate(ranked, start=1):
        r["rank"] = rank
    write_csv(out / "search.csv", SEARCH_HEADER, ranked)
    (out / "search_events.log").write_text("".join(e + "\n" for e in events), encoding="utf-8")
    best = ranked[0]
    best_cfg = dataclasses.replace(cfg, model=samples[best["sample"]][1], out=None)
    (out / "best_config.json").write_text(json.dumps(best_cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    plots.search_scatter(out / "search.png", rows)
    print(f"searched {len(rows)} samples; best val L1 {best['val_mean_l1']:.5f} (sample {best['sample']})")
    return EXIT_OK


BENCH_HEADER = ("variant", "label", "param_count", "flop_count", "median_forward_ms", "repeats", "normative")


def cmd_benchmark(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    b = cfg.benchmark
    rows = []
    for v in VariantId:
        mc = build_variant(v, cfg.model)
        model = _model(mc, cfg).eval()
        for _, st in model.named_buffers():
            st.initialized = True
        x = np.random.default_rng(cfg.seed).random((b.batch, mc.input_channels, mc.n_frames, mc.height, mc.width))
        xt = Tensor._wrap(x.astype(model.dtype))
        times = []
        with no_grad():
            for _ in range(b.repeats):
                t0 = time.perf_counter()
                model.action_forward(model.predict_frames(xt))
                times.append(1000.0 * (time.perf_counter() - t0))
        rows.append({"variant": v.value, "label": VARIANT_LABELS[v], "param_count": model.num_parameters(),
                     "flop_count": model.flop_count(), "median_forward_ms": float(np.median(times)),
                     "repeats": b.repeats, "normative": "false"})
    write_csv(out / "benchmark.csv", BENCH_HEADER, rows)
    print(f"wrote {len(rows)} benchmark rows to {out / 'benchmark.csv'} (timings are hardware-dependent)")
    return EXIT_OK


# --- argument handling ---------------------------------------------------

COMMANDS = ("generate", "train", "evaluate", "ablate", "search", "benchmark")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pedforecast", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--data", type=Path, help="dataset directory written by 'generate'")
    p.add_argument("--checkpoint", type=Path,
                   help="checkpoint directory: the model to evaluate, or the predictor to start training from")
    p.add_argument("--strategy", choices=("pretrain", "separate", "joint"))
    p.add_argument("--variant", choices=[v.value for v in VariantId])
    p.add_argument("--dump-frames", type=int, metavar="K", help="write ground-truth/prediction strips for K clips")
    p.add_argument("--resume", action="store_true", help="continue an interrupted training run")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    data = {}
    if args.config is not None:
        cfg = load_run_config(args.config)
        data = cfg.to_dict()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = str(args.out)
    if args.data is not None:
        data["data"] = str(args.data)
    if args.checkpoint is not None:
        data["checkpoint"] = str(args.checkpoint)
    if args.variant is not None:
        data["variant"] = args.variant
    if args.strategy is not None:
        data.setdefault("train", {})["strategy"] = args.strategy
    if args.dump_frames is not None:
        if args.dump_frames < 0:
            raise UsageError("--dump-frames must be >= 0")
        data.setdefault("evaluate", {})["dump_frames"] = args.dump_frames
    if "train" in data:
        data["train"].pop("seed", None)  # follows the master seed
    return parse_run_config(data, str(args.config) if args.config else "config")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "search":
            return cmd_search(cfg)
        return cmd_benchmark(cfg)
    except (UsageError, ConfigError, DatasetError) as err:
        print(f"pedforecast {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError, RuntimeError) as err:
        print(f"pedforecast {args.command}: failed: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
