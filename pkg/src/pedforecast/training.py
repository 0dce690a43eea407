"""Adagrad optimisation and the predictor / separate / joint training regimes."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward, current_tape, load_named, no_grad, save_named
from .metrics import (
    SCHEMA_LINE,
    LossBreakdown,
    MetricsReport,
    average_precision,
    combined_loss,
    compute_lookahead,
    loss_bce,
    loss_pred,
    per_frame_l1,
    ssim,
    ssim_window_size,
)
from .model import PredictionModel, load_checkpoint, save_checkpoint
from .scenes import MASK64, Batch, ClipRecord, SceneDataset, splitmix64

log = logging.getLogger(__name__)

STRATEGIES = ("pretrain", "separate", "joint")
DIVERGED = "DIVERGED"


class TrainingDiverged(RuntimeError):
    pass


# --- optimiser -----------------------------------------------------------

@dataclass
class AdagradState:
    accumulators: list
    lr: float
    eps: float = 1e-8


def adagrad_init(params: Sequence[Tensor], lr: float, eps: float = 1e-8) -> AdagradState:
    return AdagradState([np.zeros_like(p.data) for p in params], lr, eps)


def adagrad_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdagradState) -> None:
    """``G += g**2``; ``theta -= lr * g / (sqrt(G) + eps)``, in place."""
    if not (len(params) == len(grads) == len(state.accumulators)):
        raise ValueError(f"{len(params)} params, {len(grads)} grads, {len(state.accumulators)} accumulators")
    for p, g, acc in zip(params, grads, state.accumulators):
        if g is None:
            continue
        if g.shape != p.shape or acc.shape != p.shape:
            raise ValueError(f"adagrad: gradient {g.shape} / accumulator {acc.shape} vs parameter {p.shape}")
        acc += g * g
        p.data -= (state.lr * g / (np.sqrt(acc) + state.eps)).astype(p.dtype)


class Adagrad:
    def __init__(self, params: Sequence[Tensor], lr: float, eps: float = 1e-8):
        self.params = list(params)
        self.state = adagrad_init(self.params, lr, eps)

    def step(self) -> None:
        adagrad_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {f"G.{i}": a for i, a in enumerate(self.state.accumulators)}

    def load_state_dict(self, d: dict) -> None:
        for i, a in enumerate(self.state.accumulators):
            a[...] = d[f"G.{i}"]


# --- configuration and logs ----------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "joint"
    epochs: int = 3
    lr: float = 1e-3
    lam: float = 0.5
    batch_size: int = 4
    seed: int = 0
    precision: str = "float32"
    steps_per_epoch: Optional[int] = None  # cap on optimiser steps per epoch
    patience: int = 5
    stage1_epochs: Optional[int] = None  # separate strategy: cap for the predictor stage
    eval_batch_size: int = 16
    max_eval_clips: Optional[int] = None

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lam < 0 or self.lr < 0:
            raise ValueError("lam and lr must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=30, lr=1e-4)
        base.update(overrides)
        return cls(**base)


LOG_FIELDS = ("epoch", "stage", "steps", "train_l_pred", "train_l_ce", "train_l_recog",
              "val_l_pred", "val_l_ce", "val_l_recog", "val_mean_l1", "val_ap", "step_ms")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)  # l_recog (or l_pred) per optimiser step

    def append(self, **row) -> None:
        self.rows.append({k: row.get(k, math.nan) for k in LOG_FIELDS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(SCHEMA_LINE + "\n")
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


# --- per-batch objectives ------------------------------------------------

def _inputs(batch: Batch, dtype) -> tuple[Tensor, Tensor]:
    return Tensor._wrap(np.asarray(batch.x, dtype=dtype)), Tensor._wrap(np.asarray(batch.y, dtype=dtype))


def end_to_end_forward(model: PredictionModel, clip, lam: Optional[float] = None,
                       frames_override: Optional[Tensor] = None) -> tuple[Tensor, Tensor, LossBreakdown, Tensor]:
    """Predicted frames, crossing probability, loss breakdown and the differentiable total.

    ``clip`` is anything with ``x``, ``y`` (``[B, C, N, H, W]`` or a single
    ``[C, N, H, W]`` clip) and ``label``.  The action head always sees the
    predicted frames; ``frames_override`` replaces them (used to stub a
    perfect predictor).
    """
    lam = model.config.loss_weight if lam is None else lam
    x, y = np.asarray(clip.x), np.asarray(clip.y)
    if x.ndim == 4:
        x, y = x[None], y[None]
    labels = np.atleast_1d(np.asarray(clip.label))
    xt = Tensor._wrap(x.astype(model.dtype))
    yt = Tensor._wrap(y.astype(model.dtype))
    frames = model.predict_frames(xt) if frames_override is None else frames_override
    prob = model.action_forward(frames)
    lp = loss_pred(yt, frames)
    lce = loss_bce(prob, labels)
    total, breakdown = combined_loss(lp, lce, lam)
    return frames, prob, breakdown, total


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} is not finite ({value})")
    return value


class Trainer:
    """Owns a model, its optimiser and the bookkeeping for one training run."""

    def __init__(self, model: PredictionModel, dataset: SceneDataset, config: TrainConfig,
                 out_dir=None, resume: bool = False, progress: Optional[Callable[[str], None]] = None):
        config.validate()
        self.model = model
        self.dataset = dataset
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.progress = progress or (lambda msg: log.info(msg))
        self.log = TrainLog()
        self.resume = resume

    # -- data
    def epoch_records(self, split: str, epoch: int, stage: str) -> list[ClipRecord]:
        recs = self.dataset.records(split)
        salt = splitmix64((self.config.seed & MASK64) ^ splitmix64(epoch * 7919 + len(stage)))
        order = np.random.default_rng(salt).permutation(len(recs))
        recs = [recs[i] for i in order]
        cap = self.config.steps_per_epoch
        if cap is not None:
            recs = recs[: cap * self.config.batch_size]
        return recs

    def eval_records(self, split: str) -> list[ClipRecord]:
        recs = self.dataset.records(split)
        cap = self.config.max_eval_clips
        if cap is not None and len(recs) > cap:
            idx = np.linspace(0, len(recs) - 1, cap).round().astype(int)
            recs = [recs[i] for i in idx]
        return recs

    # -- steps
    def _step(self, opt: Adagrad, batch: Batch, mode: str) -> LossBreakdown:
        model, cfg = self.model, self.config
        opt.zero_grad()
        current_tape().reset()
        x, y = _inputs(batch, model.dtype)
        if mode == "pred":
            frames = model.predict_frames(x)
            lp = loss_pred(y, frames)
            bd = LossBreakdown(lp.item(), math.nan, 0.0, lp.item())
            loss = lp
        elif mode == "head":
            with no_grad():
                frames = model.predict_frames(x)
            prob = model.action_forward(Tensor._wrap(frames.data))
            lce = loss_bce(prob, batch.label)
            bd = LossBreakdown(math.nan, lce.item(), 0.0, lce.item())
            loss = lce
        else:
            _, _, bd, loss = end_to_end_forward(model, batch, cfg.lam)
        _finite(loss.item(), "training loss")
        backward(loss)
        opt.step()
        return bd

    def _validate_losses(self, split: str = "val") -> dict:
        recs = self.eval_records(split)
        if not recs:
            return {}
        model = self.model
        was_training = model.training
        model.eval()
        lp_sum = lce_sum = 0.0
        scores, labels, curves, n = [], [], [], 0
        with no_grad():
            for batch in self.dataset.iter_batches(recs, self.config.eval_batch_size, dtype=model.dtype):
                x, y = _inputs(batch, model.dtype)
                frames = model.predict_frames(x)
                prob = model.action_forward(frames)
                b = len(batch)
                lp_sum += loss_pred(y, frames).item() * b
                lce_sum += loss_bce(prob, batch.label).item() * b
                scores.extend(prob.data.tolist())
                labels.extend(batch.label.tolist())
                curves.append(np.asarray(per_frame_l1(y, frames)) * b)
                n += b
        model.train(was_training)
        lp, lce = lp_sum / n, lce_sum / n
        ap = average_precision(scores, labels) if sum(labels) else math.nan
        return dict(val_l_pred=lp, val_l_ce=lce, val_l_recog=self.config.lam * lp + lce,
                    val_mean_l1=float(np.sum(curves, axis=0).mean() / n), val_ap=ap)

    # -- checkpoints
    def _save_last(self, opt: Adagrad, epoch: int, stage: str, best: float, stale: int) -> None:
        if self.out_dir is None:
            return
        d = self.out_dir / "last"
        save_checkpoint(self.model, d, {"epoch": epoch, "stage": stage, "best": best, "stale": stale})
        save_named(d / "optimizer.bin", opt.state_dict())
        self.log.write(d / "log.csv")
        (d / "log_rows.json").write_text(json.dumps(self.log.rows))

    def _save_best(self) -> None:
        if self.out_dir is not None:
            save_checkpoint(self.model, self.out_dir / "checkpoint")

    def _try_resume(self, opt: Adagrad, stage: str) -> tuple[int, float, int]:
        if not (self.resume and self.out_dir is not None and (self.out_dir / "last" / "config.json").exists()):
            return 0, math.inf, 0
        d = self.out_dir / "last"
        record = json.loads((d / "config.json").read_text())
        if record.get("stage") != stage:
            return 0, math.inf, 0
        loaded, _ = load_checkpoint(d)
        self.model.load_state_dict(loaded.state_dict())
        opt.load_state_dict(load_named(d / "optimizer.bin"))
        self.log.rows = json.loads((d / "log_rows.json").read_text())
        self.progress(f"resumed {stage} after epoch {record['epoch']}")
        return int(record["epoch"]), float(record["best"]), int(record["stale"])

    def _diverged(self, err: Exception, good_state: dict) -> None:
        self.model.load_state_dict(good_state)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / DIVERGED).write_text(f"{err}\n", encoding="utf-8")
            self._save_best()
        raise TrainingDiverged(str(err)) from err

    # -- loops
    def _run_stage(self, stage: str, mode: str, params: list, epochs: int, early_stop: bool,
                   criterion: str) -> None:
        cfg = self.config
        opt = Adagrad(params, cfg.lr)
        start, best, stale = self._try_resume(opt, stage)
        for epoch in range(start, epochs):
            good_state = self.model.state_dict()
            self.model.train()
            if mode == "head":
                # the frozen predictor keeps its normalisation statistics
                self.model.encoder.eval()
                self.model.decoder.eval()
            sums = {"l_pred": 0.0, "l_ce": 0.0, "l_recog": 0.0}
            steps, t0 = 0, time.perf_counter()
            try:
                for batch in self.dataset.iter_batches(self.epoch_records("train", epoch, stage), cfg.batch_size,
                                                       dtype=self.model.dtype):
                    bd = self._step(opt, batch, mode)
                    sums["l_pred"] += bd.l_pred
                    sums["l_ce"] += bd.l_ce
                    sums["l_recog"] += bd.l_recog
                    self.log.step_losses.append(bd.l_recog)
                    steps += 1
            except (NonFiniteError, FloatingPointError) as err:
                self._diverged(err, good_state)
            step_ms = 1000.0 * (time.perf_counter() - t0) / max(steps, 1)
            val = self._validate_losses("val")
            self.log.append(epoch=epoch + 1, stage=stage, steps=steps, step_ms=step_ms,
                            **{f"train_{k}": v / max(steps, 1) for k, v in sums.items()}, **val)
            score = val.get(criterion, sums["l_recog"] / max(steps, 1))
            if score < best:
                best, stale = score, 0
                self._save_best()
            else:
                stale += 1
            self._save_last(opt, epoch + 1, stage, best, stale)
            self.progress(f"{stage} epoch {epoch + 1}/{epochs}: train {sums['l_recog'] / max(steps, 1):.4f} "
                          f"val {score:.4f}")
            if early_stop and stale >= cfg.patience:
                self.progress(f"{stage}: no improvement for {stale} epochs, stopping")
                break

    def train_predictor(self) -> TrainLog:
        self.model.requires_grad_(True)
        self._run_stage("pretrain", "pred", self.model.predictor_parameters(), self.config.epochs, False,
                        "val_l_pred")
        return self.log

    def train_joint(self) -> TrainLog:
        self.model.requires_grad_(True)
        self._run_stage("joint", "joint", self.model.parameters(), self.config.epochs, False, "val_l_recog")
        return self.log

    def train_separate(self) -> TrainLog:
        cfg = self.config
        self.model.requires_grad_(True)
        stage1 = cfg.stage1_epochs or cfg.epochs
        self._run_stage("separate-predictor", "pred", self.model.predictor_parameters(), stage1, True,
                        "val_l_pred")
        for p in self.model.predictor_parameters():
            p.requires_grad = False
        self._run_stage("separate-head", "head", self.model.head.parameters(), cfg.epochs, False, "val_l_ce")
        self.model.requires_grad_(True)
        return self.log

    def run(self) -> TrainLog:
        fn = {"pretrain": self.train_predictor, "joint": self.train_joint, "separate": self.train_separate}
        out = fn[self.config.strategy]()
        if self.out_dir is not None:
            self.log.write(self.out_dir / "train_log.csv")
        return out


def train_predictor(model, dataset, config: TrainConfig, **kw) -> TrainLog:
    return Trainer(model, dataset, dataclasses.replace(config, strategy="pretrain"), **kw).train_predictor()


def train_joint(model, dataset, config: TrainConfig, **kw) -> TrainLog:
    return Trainer(model, dataset, dataclasses.replace(config, strategy="joint"), **kw).train_joint()


def train_separate(model, dataset, config: TrainConfig, **kw) -> TrainLog:
    return Trainer(model, dataset, dataclasses.replace(config, strategy="separate"), **kw).train_separate()


def fit_batch(model: PredictionModel, batch: Batch, steps: int, lr: float, mode: str = "pred",
              lam: float = 0.5) -> list[float]:
    """Repeatedly optimise on one batch; returns the loss before every step."""
    params = model.predictor_parameters() if mode == "pred" else model.parameters()
    opt = Adagrad(params, lr)
    model.train()
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        x, y = _inputs(batch, model.dtype)
        if mode == "pred":
            loss = loss_pred(y, model.predict_frames(x))
        else:
            _, _, _, loss = end_to_end_forward(model, batch, lam)
        losses.append(_finite(loss.item(), "loss"))
        backward(loss)
        opt.step()
    return losses


# --- evaluation ----------------------------------------------------------

@dataclass
class Predictions:
    frames: np.ndarray  # [n, C, N, H, W]
    truth: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    clip_ids: list


def predict_split(model: PredictionModel, dataset: SceneDataset, records: Sequence[ClipRecord],
                  batch_size: int = 16) -> tuple[Predictions, float]:
    """Eval-mode predictions for ``records`` and the mean forward time per clip in ms."""
    if not records:
        raise ValueError("cannot evaluate an empty split")
    model.eval()
    frames, truth, scores, labels, ids = [], [], [], [], []
    elapsed = 0.0
    with no_grad():
        for batch in dataset.iter_batches(records, batch_size, dtype=model.dtype):
            x, _ = _inputs(batch, model.dtype)
            t0 = time.perf_counter()
            pred = model.predict_frames(x)
            prob = model.action_forward(pred)
            elapsed += time.perf_counter() - t0
            frames.append(pred.data)
            truth.append(batch.y)
            scores.append(prob.data.astype(np.float64))
            labels.append(batch.label)
            ids.extend(batch.clip_ids)
    preds = Predictions(np.concatenate(frames), np.concatenate(truth), np.concatenate(scores),
                        np.concatenate(labels), ids)
    return preds, 1000.0 * elapsed / len(records)


def report_from_predictions(model: PredictionModel, preds: Predictions, fps: float,
                            runtime_ms: float) -> MetricsReport:
    cfg = model.config
    curve = per_frame_l1(preds.truth, preds.frames)
    window = ssim_window_size(cfg.height, cfg.width)
    n_pos = int(preds.labels.sum())
    look = compute_lookahead(cfg.n_frames, fps, runtime_ms)
    return MetricsReport(
        per_frame_l1=curve,
        mean_l1=float(sum(curve) / len(curve)),
        mean_ssim=ssim(preds.truth, preds.frames, window),
        ap=average_precision(preds.scores, preds.labels) if n_pos else math.nan,
        chance_ap=n_pos / len(preds.labels),
        param_count=model.num_parameters(),
        flop_count=model.flop_count(),
        runtime_ms=runtime_ms,
        horizon_ms=look.horizon_ms,
        lookahead_ms=look.lookahead_ms,
        lookahead_fraction=look.fraction,
        ssim_window=window,
        n_clips=len(preds.labels),
    )


def evaluate(model: PredictionModel, dataset: SceneDataset, split: str = "test", batch_size: int = 16,
             max_clips: Optional[int] = None) -> MetricsReport:
    recs = dataset.records(split)
    if max_clips is not None and len(recs) > max_clips:
        idx = np.linspace(0, len(recs) - 1, max_clips).round().astype(int)
        recs = [recs[i] for i in idx]
    preds, runtime = predict_split(model, dataset, recs, batch_size)
    return report_from_predictions(model, preds, dataset.config.fps, runtime)
