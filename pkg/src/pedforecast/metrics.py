"""Training objectives and evaluation metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, Tensor, ops

BCE_CLAMP = 1e-7
SCHEMA_LINE = "# schema=1"


# --- losses --------------------------------------------------------------

def loss_pred(y: Tensor, y_hat: Tensor) -> Tensor:
    """Squared plus absolute pixel error, summed over frames and pixels, divided by P = H*W.

    The result is further averaged over batch and channels so its scale does
    not depend on the batch size.
    """
    if y.shape != y_hat.shape:
        raise ShapeError(f"loss_pred: shape mismatch {y.shape} vs {y_hat.shape}")
    if y.ndim != 5:
        raise ShapeError(f"loss_pred expects [B,C,T,H,W], got {y.shape}")
    B, C, _, H, W = y.shape
    d = ops.sub(y_hat, y)
    total = ops.sum(ops.add(ops.square(d), ops.abs(d)))
    return ops.scalar_mul(total, 1.0 / (H * W * B * C))


def _check_labels(labels) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.isin(lab, (0.0, 1.0)).all():
        raise ValueError(f"labels must be 0 or 1, got {np.unique(lab).tolist()}")
    return lab


def loss_bce(prob: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with the probability clamped to [1e-7, 1 - 1e-7]."""
    lab = _check_labels(labels)
    if prob.size != lab.size:
        raise ShapeError(f"loss_bce: {prob.size} probabilities for {lab.size} labels")
    p = ops.clip(ops.reshape(prob, (lab.size,)), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = Tensor._wrap(lab.astype(p.dtype))
    not_y = Tensor._wrap((1.0 - lab).astype(p.dtype))
    ll = ops.add(ops.mul(y, ops.log(p)), ops.mul(not_y, ops.log(ops.scalar_add(ops.neg(p), 1.0))))
    return ops.neg(ops.mean(ll))


@dataclass(frozen=True)
class LossBreakdown:
    l_pred: float
    l_ce: float
    lam: float
    l_recog: float


def loss_recog(l_pred: float, l_ce: float, lam: float = 0.5) -> LossBreakdown:
    if lam < 0:
        raise ValueError(f"loss weight must be >= 0, got {lam}")
    l_pred, l_ce, lam = float(l_pred), float(l_ce), float(lam)
    return LossBreakdown(l_pred, l_ce, lam, lam * l_pred + l_ce)


def combined_loss(l_pred: Tensor, l_ce: Tensor, lam: float = 0.5) -> tuple[Tensor, LossBreakdown]:
    """Differentiable ``lam * l_pred + l_ce`` plus its float breakdown."""
    breakdown = loss_recog(l_pred.item(), l_ce.item(), lam)
    return ops.add(ops.scalar_mul(l_pred, lam), l_ce), breakdown


# --- frame metrics -------------------------------------------------------

def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def per_frame_l1(y, y_hat) -> list[float]:
    """Mean absolute error per time step of ``[B, C, T, H, W]`` videos."""
    a, b = _arrays(y, y_hat)
    if a.ndim != 5:
        raise ShapeError(f"per_frame_l1 expects [B,C,T,H,W], got {a.shape}")
    err = np.abs(a - b)
    # pixels, then channels, then the batch
    return [float(v) for v in err.mean(axis=(3, 4)).mean(axis=1).mean(axis=0)]


def mean_l1(y, y_hat) -> float:
    curve = per_frame_l1(y, y_hat)
    return float(sum(curve) / len(curve))


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_window_size(height: int, width: int) -> int:
    if min(height, width) >= 11:
        return 11
    if min(height, width) >= 7:
        return 7
    raise ValueError(f"frame {height}x{width} is smaller than the smallest SSIM window (7x7)")


def ssim(a, b, window: Optional[int] = None, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over valid window positions and all leading axes.

    Inputs are arrays (or tensors) whose last two axes are H and W.
    """
    x, y = _arrays(a, b)
    if x.ndim < 2:
        raise ShapeError("ssim needs at least two (H, W) axes")
    H, W = x.shape[-2:]
    size = window or ssim_window_size(H, W)
    if size > H or size > W:
        raise ValueError(f"frame {H}x{W} is smaller than the {size}x{size} SSIM window")
    w = gaussian_window(size, sigma)

    def filt(img):
        return np.einsum("...ij,ij->...", sliding_window_view(img, (size, size), axis=(-2, -1)), w)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def video_ssim(y, y_hat, window: Optional[int] = None) -> float:
    """Mean SSIM over every frame and channel of ``[B, C, T, H, W]`` videos."""
    return ssim(y, y_hat, window)


# --- classification ------------------------------------------------------

def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Scores are ranked descending; equal scores keep their input order.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("average precision of an empty ranking")
    lab = _check_labels(labels)
    if lab.size != s.size:
        raise ValueError(f"{s.size} scores for {lab.size} labels")
    n_pos = int(lab.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    hits = lab[order]
    ranks = np.arange(1, s.size + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits == 1].sum() / n_pos)


# --- look-ahead ----------------------------------------------------------

class Lookahead(NamedTuple):
    horizon_ms: float
    lookahead_ms: float
    fraction: float
    clamped: bool


def compute_lookahead(n_frames: int, fps: float, runtime_ms: float) -> Lookahead:
    """Time left to react: prediction horizon ``1000 N / fps`` minus model runtime."""
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    horizon = 1000.0 * n_frames / fps
    look = horizon - runtime_ms
    clamped = look <= 0
    if clamped:
        look = 0.0
    return Lookahead(horizon, look, look / horizon if horizon > 0 else 0.0, clamped)


# --- report --------------------------------------------------------------

@dataclass
class MetricsReport:
    per_frame_l1: list = field(default_factory=list)
    mean_l1: float = math.nan
    mean_ssim: float = math.nan
    ap: float = math.nan
    chance_ap: float = math.nan
    param_count: int = 0
    flop_count: int = 0
    runtime_ms: float = math.nan
    horizon_ms: float = math.nan
    lookahead_ms: float = math.nan
    lookahead_fraction: float = math.nan
    ssim_window: int = 11
    n_clips: int = 0

    SCALAR_FIELDS = ("mean_l1", "mean_ssim", "ap", "chance_ap", "param_count", "flop_count", "runtime_ms",
                     "horizon_ms", "lookahead_ms", "lookahead_fraction", "ssim_window", "n_clips")

    def csv_header(self) -> list[str]:
        return list(self.SCALAR_FIELDS) + [f"l1_t{t + 1}" for t in range(len(self.per_frame_l1))]

    def csv_row(self) -> list:
        return [getattr(self, f) for f in self.SCALAR_FIELDS] + list(self.per_frame_l1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(SCHEMA_LINE + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()

    def to_text(self) -> str:
        d = asdict(self)
        curve = " ".join(f"{v:.5f}" for v in d.pop("per_frame_l1"))
        lines = [f"{k}: {v}" for k, v in d.items()]
        lines.append(f"per_frame_l1: {curve}")
        return "\n".join(lines) + "\n"


def read_csv_rows(path) -> list[dict]:
    """Read a report CSV written by this package (comment lines skipped)."""
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))
