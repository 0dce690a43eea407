"""Synthetic ego-motion street scenes with sprite pedestrians and crossing labels."""
from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

MASK64 = (1 << 64) - 1
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = "clip_id video_id start_frame label split tag"


class DatasetError(ValueError):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def video_seed(master: int, index: int) -> int:
    return splitmix64(splitmix64(master & MASK64) ^ index)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 48
    channels: int = 1
    length: int = 40
    n_frames: int = 8
    n_videos: int = 60
    ego_velocity: tuple = (0.0, -0.25)  # (vx, vy) pixels per frame
    ego_jitter: float = 0.1
    sprite_count: tuple = (2, 3)
    sprite_width: tuple = (3.0, 4.0)
    sprite_height: tuple = (6.0, 8.0)
    sprite_speed: tuple = (0.4, 1.0)
    crossing_prob: float = 0.7
    intensity: tuple = (0.85, 1.0)
    road_band: tuple = (0.4, 0.6)  # screen-fixed column range as fractions of the width
    noise: float = 0.02
    fps: float = 30.0

    def __post_init__(self):
        for name in ("ego_velocity", "sprite_count", "sprite_width", "sprite_height", "sprite_speed",
                     "intensity", "road_band"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def validate(self) -> None:
        if self.height % 8 or self.width % 8:
            raise DatasetError(f"frame size {self.height}x{self.width} must be divisible by 8")
        if self.channels not in (1, 3):
            raise DatasetError(f"channels must be 1 or 3, got {self.channels}")
        if self.length < 2 * self.n_frames or self.n_frames < 1:
            raise DatasetError(f"sequence length {self.length} must be >= 2N = {2 * self.n_frames}")
        lo, hi = self.road_band
        if not 0 <= lo < hi <= 1:
            raise DatasetError(f"road band {self.road_band} must satisfy 0 <= lo < hi <= 1")
        if self.sprite_count[0] < 0 or self.sprite_count[0] > self.sprite_count[1]:
            raise DatasetError(f"bad sprite count range {self.sprite_count}")
        if self.noise < 0 or self.fps <= 0:
            raise DatasetError("noise must be >= 0 and fps > 0")

    @property
    def band_pixels(self) -> tuple[float, float]:
        return self.road_band[0] * self.width, self.road_band[1] * self.width

    @property
    def clips_per_video(self) -> int:
        return self.length - 2 * self.n_frames + 1

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def static(cls, **overrides) -> "SceneConfig":
        """No ego-motion, motionless sprites and no noise: every frame of a video is identical."""
        base = dict(ego_velocity=(0.0, 0.0), ego_jitter=0.0, sprite_speed=(0.0, 0.0), noise=0.0)
        base.update(overrides)
        return cls(**base)


@dataclass
class Sprite:
    """A box pedestrian in world coordinates (top-left corner).

    Velocity switches from ``velocity`` to ``velocity_after`` at frame
    ``switch_frame`` when both are given.
    """

    x: float
    y: float
    velocity: tuple = (0.0, 0.0)
    width: float = 3.0
    height: float = 7.0
    color: tuple = (1.0,)
    switch_frame: Optional[int] = None
    velocity_after: Optional[tuple] = None

    def world_positions(self, length: int) -> np.ndarray:
        t = np.arange(length, dtype=np.float64)
        v0 = np.asarray(self.velocity, dtype=np.float64)
        if self.switch_frame is None or self.velocity_after is None:
            disp = t[:, None] * v0
        else:
            s = float(self.switch_frame)
            v1 = np.asarray(self.velocity_after, dtype=np.float64)
            disp = np.minimum(t, s)[:, None] * v0 + np.maximum(t - s, 0.0)[:, None] * v1
        return np.array([self.x, self.y]) + disp


@dataclass
class Trajectory:
    """Rendered (screen) top-left positions per frame plus the box size."""

    positions: np.ndarray  # [L, 2] as (x, y)
    width: float
    height: float

    def x_intervals(self) -> np.ndarray:
        x = self.positions[:, 0]
        return np.stack([x, x + self.width], axis=1)


def ego_offsets(velocity: Sequence[float], length: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)[:, None]
    return t * np.asarray(velocity, dtype=np.float64)


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.random((max(h // 4, 2), max(w // 4, 2)))
    yy, xx = np.meshgrid(np.arange(h) * coarse.shape[0] / h, np.arange(w) * coarse.shape[1] / w, indexing="ij")
    smooth = map_coordinates(coarse, [yy, xx], order=3, mode="grid-wrap")
    smooth = (smooth - smooth.min()) / max(smooth.max() - smooth.min(), 1e-12)
    return 0.3 + 0.4 * smooth


def _coverage(lo: float, size: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [i, i+1) covered by the interval [lo, lo+size)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, lo + size) - np.maximum(edges, lo), 0.0, 1.0)


def render_frames(cfg: SceneConfig, sprites: Sequence[Sprite], ego_velocity: Sequence[float],
                  rng: np.random.Generator) -> tuple[np.ndarray, list[Trajectory]]:
    """Render ``cfg.length`` frames as uint8 ``[L, C, H, W]`` (values are k/255)."""
    H, W, C, L = cfg.height, cfg.width, cfg.channels, cfg.length
    tex = _texture(rng, H, W)
    offsets = ego_offsets(ego_velocity, L)
    b0, b1 = cfg.band_pixels
    col_cov = _coverage(b0, b1 - b0, W)  # road band mask, anti-aliased at the edges
    lane = _coverage((b0 + b1) / 2 - 0.5, 1.0, W)
    dash_period, dash_on = 8.0, 4.0
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    trajs = []
    world = [s.world_positions(L) for s in sprites]
    for s, wp in zip(sprites, world):
        trajs.append(Trajectory(wp - offsets, s.width, s.height))
    frames = np.empty((L, C, H, W), dtype=np.uint8)
    for t in range(L):
        ox, oy = offsets[t]
        bg = map_coordinates(tex, [yy + oy, xx + ox], order=1, mode="grid-wrap")
        phase = np.mod(np.arange(H) + oy, dash_period)
        dash = np.clip(dash_on - phase, 0.0, 1.0) * (phase < dash_on) + np.clip(phase + 1 - dash_period, 0.0, 1.0)
        road = 0.15 + 0.45 * np.outer(dash, lane)
        gray = bg * (1 - col_cov) + road * col_cov
        img = np.repeat(gray[None], C, axis=0)
        for s, tr in zip(sprites, trajs):
            x, y = tr.positions[t]
            cov = np.outer(_coverage(y, s.height, H), _coverage(x, s.width, W))
            if not cov.any():
                continue
            color = np.resize(np.asarray(s.color, dtype=np.float64), C)[:, None, None]
            img = img * (1 - cov) + color * cov
        if cfg.noise > 0:
            img = img + cfg.noise * rng.standard_normal(img.shape)
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return frames, trajs


def random_sprites(cfg: SceneConfig, rng: np.random.Generator, ego_velocity) -> list[Sprite]:
    """Sprites either walk into the road band at a random frame or stroll on the sidewalk."""
    H, W, L = cfg.height, cfg.width, cfg.length
    b0, b1 = cfg.band_pixels
    n = int(rng.integers(cfg.sprite_count[0], cfg.sprite_count[1] + 1))
    ex = ego_offsets(ego_velocity, L)
    out = []
    for _ in range(n):
        w = float(rng.uniform(*cfg.sprite_width))
        h = float(rng.uniform(*cfg.sprite_height))
        speed = float(rng.uniform(*cfg.sprite_speed))
        color = tuple(float(c) for c in rng.uniform(*cfg.intensity, size=cfg.channels))
        y0 = float(rng.uniform(0.15 * H, 0.85 * H - h))
        from_left = bool(rng.random() < 0.5)
        if rng.random() < cfg.crossing_prob:
            # screen position reaches the band edge at frame e
            # entries in [N, L - N] can fall in the future half of some window
            e = int(rng.integers(cfg.n_frames, L - cfg.n_frames + 1))
            vx = speed if from_left else -speed
            edge = b0 - w if from_left else b1
            x0 = edge - vx * e + ex[e, 0]
        else:
            # sidewalk stroller, walking away from the road or standing
            vx = -speed * 0.5 if from_left else speed * 0.5
            lo, hi = (0.0, b0 - w - 2.0) if from_left else (b1 + 2.0, W - w)
            x0 = float(rng.uniform(lo, max(lo, hi)))
        out.append(Sprite(x0, y0, (vx, 0.0), w, h, color))
    return out


def render_sequence(cfg: SceneConfig, seed: int) -> tuple[np.ndarray, list[Trajectory]]:
    """A full video as uint8 frames ``[L, C, H, W]`` plus rendered sprite trajectories."""
    cfg.validate()
    rng = np.random.default_rng(seed & MASK64)
    j = cfg.ego_jitter
    ego = (cfg.ego_velocity[0] + float(rng.uniform(-j, j)), cfg.ego_velocity[1] + float(rng.uniform(-j, j)))
    sprites = random_sprites(cfg, rng, ego)
    return render_frames(cfg, sprites, ego, rng)


def to_float(frames_u8: np.ndarray, dtype=np.float32) -> np.ndarray:
    dtype = np.dtype(dtype)
    return frames_u8.astype(dtype) / dtype.type(255.0)


# --- labels --------------------------------------------------------------

def band_overlap(traj: Trajectory, band: tuple[float, float]) -> np.ndarray:
    iv = traj.x_intervals()
    return (iv[:, 0] < band[1]) & (iv[:, 1] > band[0])


def label_crossing(trajectories: Sequence[Trajectory], band: tuple[float, float], n_frames: int,
                   start: int = 0) -> tuple[int, str]:
    """Label of the 2N-frame window beginning at ``start``.

    1 when some sprite overlaps the band in the future half without having
    overlapped it in the past half.  Returns ``(label, tag)`` where tag is
    ``crossing``, ``already-crossing`` or ``none``.
    """
    past = slice(start, start + n_frames)
    future = slice(start + n_frames, start + 2 * n_frames)
    already = False
    for tr in trajectories:
        ov = band_overlap(tr, band)
        if len(ov) < start + 2 * n_frames:
            raise DatasetError(f"trajectory covers {len(ov)} frames, window needs {start + 2 * n_frames}")
        was_in = bool(ov[past].any())
        if not was_in and ov[future].any():
            return 1, "crossing"
        already = already or was_in
    return 0, ("already-crossing" if already else "none")


# --- windowing and splits ------------------------------------------------

@dataclass
class ClipSample:
    x: np.ndarray  # [C, N, H, W]
    y: np.ndarray
    label: int
    clip_id: str
    video_id: str


@dataclass
class Batch:
    x: np.ndarray  # [B, C, N, H, W]
    y: np.ndarray
    label: np.ndarray
    clip_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.label)


def window_clips(frames: np.ndarray, n_frames: int, stride: int = 1) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Split ``[L, ...]`` frames into ``(start, past, future)`` windows of 2N frames."""
    L = len(frames)
    if L < 2 * n_frames:
        raise DatasetError(f"sequence of {L} frames is shorter than 2N = {2 * n_frames}")
    return [(j, frames[j:j + n_frames], frames[j + n_frames:j + 2 * n_frames])
            for j in range(0, L - 2 * n_frames + 1, stride)]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    crossing_counts: dict = field(default_factory=dict)

    def of(self, name: str) -> list:
        return getattr(self, name)


def split_dataset(video_ids: Sequence[str], seed: int) -> DatasetSplit:
    """Shuffle videos and assign 60/10/30 percent of them to train/val/test."""
    ids = list(video_ids)
    if len(ids) < 10:
        raise DatasetError(f"need at least 10 videos to split, got {len(ids)}")
    order = np.random.default_rng(seed & MASK64).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(0.6 * len(ids)))
    n_val = max(1, int(round(0.1 * len(ids))))
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])


@dataclass
class ClipRecord:
    clip_id: str
    video_id: str
    start: int
    label: int
    split: str
    tag: str = "none"


@dataclass
class Video:
    video_id: str
    frames: np.ndarray  # uint8 [L, C, H, W]
    trajectories: list = field(default_factory=list)


class SceneDataset:
    """Videos plus the clip manifest; clips are sliced from video frames on demand."""

    def __init__(self, config: SceneConfig, videos: list[Video], clips: list[ClipRecord], seed: int = 0):
        self.config = config
        self.videos = {v.video_id: v for v in videos}
        self.clips = clips
        self.seed = seed

    def __len__(self) -> int:
        return len(self.clips)

    def records(self, split: Optional[str] = None) -> list[ClipRecord]:
        if split is None or split == "all":
            return list(self.clips)
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [c for c in self.clips if c.split == split]

    def sample(self, rec: ClipRecord, dtype=np.float32) -> ClipSample:
        frames = self.videos[rec.video_id].frames
        n = self.config.n_frames
        seg = to_float(frames[rec.start:rec.start + 2 * n], dtype).transpose(1, 0, 2, 3)
        return ClipSample(seg[:, :n], seg[:, n:], rec.label, rec.clip_id, rec.video_id)

    def batch(self, recs: Sequence[ClipRecord], dtype=np.float32) -> Batch:
        samples = [self.sample(r, dtype) for r in recs]
        return Batch(np.stack([s.x for s in samples]), np.stack([s.y for s in samples]),
                     np.array([s.label for s in samples], dtype=np.int64), [s.clip_id for s in samples])

    def iter_batches(self, recs: Sequence[ClipRecord], batch_size: int, shuffle_seed: Optional[int] = None,
                     dtype=np.float32) -> Iterator[Batch]:
        recs = list(recs)
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed & MASK64).permutation(len(recs))
            recs = [recs[i] for i in order]
        for i in range(0, len(recs), batch_size):
            yield self.batch(recs[i:i + batch_size], dtype)

    def split(self) -> DatasetSplit:
        out = DatasetSplit([], [], [])
        seen = {s: [] for s in SPLITS}
        for c in self.clips:
            if c.video_id not in seen[c.split]:
                seen[c.split].append(c.video_id)
        out.train, out.val, out.test = seen["train"], seen["val"], seen["test"]
        out.crossing_counts = {s: sum(c.label for c in self.clips if c.split == s) for s in SPLITS}
        return out

    def positive_rate(self, split: Optional[str] = None) -> float:
        recs = self.records(split)
        return sum(r.label for r in recs) / max(len(recs), 1)


def generate_dataset(cfg: SceneConfig, seed: int) -> SceneDataset:
    cfg.validate()
    videos = []
    for i in range(cfg.n_videos):
        frames, trajs = render_sequence(cfg, video_seed(seed, i))
        videos.append(Video(f"v{i:03d}", frames, trajs))
    split = split_dataset([v.video_id for v in videos], seed) if cfg.n_videos >= 10 else None
    where = {}
    if split is not None:
        for name in SPLITS:
            for vid in split.of(name):
                where[vid] = name
    band = cfg.band_pixels
    clips = []
    for v in videos:
        for start in range(cfg.clips_per_video):
            label, tag = label_crossing(v.trajectories, band, cfg.n_frames, start)
            clips.append(ClipRecord(f"{v.video_id}_{start:03d}", v.video_id, start, label,
                                    where.get(v.video_id, "train"), tag))
    return SceneDataset(cfg, videos, clips, seed)


# --- file formats --------------------------------------------------------

def write_pnm(path, img: np.ndarray) -> None:
    """Write ``[C, H, W]`` uint8 as binary PGM (C=1) or PPM (C=3)."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[0] not in (1, 3):
        raise DatasetError(f"expected uint8 [1|3, H, W], got {img.dtype} {img.shape}")
    c, h, w = img.shape
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


_PNM_HEADER = re.compile(rb"^(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PNM_HEADER.match(raw)
    if m is None:
        raise DatasetError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    body = raw[m.end():]
    if len(body) != h * w * c:
        raise DatasetError(f"{path}: truncated pixel data ({len(body)} of {h * w * c} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1).copy()


def write_dataset(ds: SceneDataset, root) -> Path:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    ext = "pgm" if ds.config.channels == 1 else "ppm"
    for vid, v in ds.videos.items():
        d = root / "frames" / vid
        d.mkdir(exist_ok=True)
        for t, img in enumerate(v.frames):
            write_pnm(d / f"{t:04d}.{ext}", img)
    lines = [MANIFEST_HEADER]
    lines += [f"{c.clip_id} {c.video_id} {c.start} {c.label} {c.split} {c.tag}" for c in ds.clips]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {"scene": ds.config.to_dict(), "seed": ds.seed,
            "trajectories": {vid: [{"positions": t.positions.tolist(), "width": t.width, "height": t.height}
                                   for t in v.trajectories] for vid, v in ds.videos.items()}}
    (root / "scene.json").write_text(json.dumps(meta), encoding="utf-8")
    return root


def read_manifest(path) -> list[ClipRecord]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise DatasetError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
    out = []
    for n, line in enumerate(text[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise DatasetError(f"{path}:{n}: expected 6 fields, got {len(parts)}")
        cid, vid, start, label, split, tag = parts
        try:
            rec = ClipRecord(cid, vid, int(start), int(label), split, tag)
        except ValueError:
            raise DatasetError(f"{path}:{n}: non-integer start/label in {line!r}") from None
        if rec.label not in (0, 1) or split not in SPLITS:
            raise DatasetError(f"{path}:{n}: bad label or split in {line!r}")
        out.append(rec)
    return out


def read_dataset(root) -> SceneDataset:
    root = Path(root)
    try:
        meta = json.loads((root / "scene.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"{root}: no scene.json; not a dataset directory") from None
    cfg = SceneConfig.from_dict(meta["scene"])
    clips = read_manifest(root / "manifest.txt")
    first_clip = {}
    for c in clips:
        first_clip.setdefault(c.video_id, c.clip_id)
    ext = "pgm" if cfg.channels == 1 else "ppm"
    videos = []
    for vid in sorted(first_clip):
        frames = []
        for t in range(cfg.length):
            path = root / "frames" / vid / f"{t:04d}.{ext}"
            try:
                frames.append(read_pnm(path))
            except (DatasetError, OSError) as err:
                raise DatasetError(f"clip {first_clip[vid]}: cannot read frame {t} of video {vid}: {err}") from None
        trajs = [Trajectory(np.asarray(t["positions"], dtype=np.float64), t["width"], t["height"])
                 for t in meta.get("trajectories", {}).get(vid, [])]
        arr = np.stack(frames)
        if arr.shape[1:] != (cfg.channels, cfg.height, cfg.width):
            raise DatasetError(f"clip {first_clip[vid]}: frame shape {arr.shape[1:]} does not match config")
        videos.append(Video(vid, arr, trajs))
    return SceneDataset(cfg, videos, clips, int(meta.get("seed", 0)))


def dump_strip(path, truth: np.ndarray, pred: np.ndarray) -> None:
    """Two-row image: ground-truth frames on top, predictions below; inputs ``[C, T, H, W]`` in [0,1]."""
    def row(v):
        return np.concatenate(list(v.transpose(1, 0, 2, 3)), axis=2)
    img = np.concatenate([row(truth), row(pred)], axis=1)
    write_pnm(path, np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))


def positive_rate_of(cfg: SceneConfig, seed: int, n_clips: int) -> float:
    """Positive rate of the first ``n_clips`` clips generated from ``seed``."""
    n_videos = math.ceil(n_clips / cfg.clips_per_video)
    ds = generate_dataset(dataclasses.replace(cfg, n_videos=max(n_videos, 1)), seed)
    labels = [c.label for c in ds.clips[:n_clips]]
    return sum(labels) / len(labels)
