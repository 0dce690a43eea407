"""JSON run configuration: scene, model, training and per-command settings."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .model import ConfigError, ModelConfig, VariantId
from .scenes import DatasetError, SceneConfig
from .training import TrainConfig

RESOLVED_NAME = "resolved_config.json"


@dataclass(frozen=True)
class EvalSettings:
    split: str = "test"
    batch_size: int = 16
    max_clips: Optional[int] = None
    dump_frames: int = 0


@dataclass(frozen=True)
class SearchSpace:
    spatial_kernels: tuple = (3, 5, 7, 11)
    temporal_dilations: tuple = (1, 2, 3, 4)
    cell_kernels: tuple = (3, 5, 7)
    temporal_kernels: tuple = (2, 3, 4)
    cell_temporal_kernels: tuple = (2, 3, 4)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            object.__setattr__(self, f.name, tuple(int(v) for v in getattr(self, f.name)))


@dataclass(frozen=True)
class SearchSettings:
    budget: int = 38
    steps: int = 300
    max_eval_clips: Optional[int] = 64
    space: SearchSpace = field(default_factory=SearchSpace)


@dataclass(frozen=True)
class BenchmarkSettings:
    repeats: int = 20
    batch: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: Optional[str] = None
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    variant: str = "ours"
    model_preset: str = "desk"
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvalSettings = field(default_factory=EvalSettings)
    search: SearchSettings = field(default_factory=SearchSettings)
    benchmark: BenchmarkSettings = field(default_factory=BenchmarkSettings)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def write(self, directory) -> Path:
        path = Path(directory) / RESOLVED_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def model_config(self) -> ModelConfig:
        """Model for the selected variant."""
        from .model import build_variant
        return build_variant(self.variant, self.model)


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(fields)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def _model_base(preset: str, overrides: dict, where: str) -> ModelConfig:
    if preset not in ("desk", "paper"):
        raise ConfigError(f"{where}.model_preset: expected 'desk' or 'paper', got {preset!r}")
    base = ModelConfig.desk() if preset == "desk" else ModelConfig.paper()
    merged = {**base.to_dict(), **overrides}
    return _build(ModelConfig, merged, f"{where}.model")


def parse_run_config(data: dict, where: str = "config") -> RunConfig:
    """Validate a decoded JSON object; the model follows the scene's frame geometry."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: top level must be an object")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    scene = _build(SceneConfig, data.get("scene", {}), f"{where}.scene")
    model_over = dict(data.get("model", {}))
    if not isinstance(model_over, dict):
        raise ConfigError(f"{where}.model: expected an object")
    geometry = {"n_frames": scene.n_frames, "input_channels": scene.channels,
                "height": scene.height, "width": scene.width}
    for k, v in geometry.items():
        if k in model_over and model_over[k] != v:
            raise ConfigError(f"{where}.model.{k}={model_over[k]} conflicts with the scene ({v})")
        model_over[k] = v
    model = _model_base(data.get("model_preset", "desk"), model_over, where)
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"{where}.seed: expected an integer, got {seed!r}")
    train = _build(TrainConfig, {**data.get("train", {}), "seed": seed}, f"{where}.train")
    train_lam = data.get("train", {}).get("lam")
    if train_lam is not None and train_lam != model.loss_weight:
        model = dataclasses.replace(model, loss_weight=train_lam)
    else:
        train = dataclasses.replace(train, lam=model.loss_weight)
    search_raw = dict(data.get("search", {}))
    space = _build(SearchSpace, search_raw.pop("space", {}), f"{where}.search.space")
    search = _build(SearchSettings, {**search_raw, "space": space}, f"{where}.search")
    cfg = RunConfig(
        seed=seed,
        out=data.get("out"),
        data=data.get("data"),
        checkpoint=data.get("checkpoint"),
        variant=data.get("variant", "ours"),
        model_preset=data.get("model_preset", "desk"),
        scene=scene,
        model=model,
        train=train,
        evaluate=_build(EvalSettings, data.get("evaluate", {}), f"{where}.evaluate"),
        search=search,
        benchmark=_build(BenchmarkSettings, data.get("benchmark", {}), f"{where}.benchmark"),
    )
    validate_run_config(cfg, where)
    return cfg


def validate_run_config(cfg: RunConfig, where: str = "config") -> None:
    try:
        VariantId(cfg.variant)
    except ValueError:
        raise ConfigError(f"{where}.variant: unknown variant {cfg.variant!r}") from None
    try:
        cfg.scene.validate()
    except DatasetError as err:
        raise ConfigError(f"{where}.scene: {err}") from None
    try:
        cfg.model.validate()
        cfg.train.validate()
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None
    if cfg.evaluate.split not in ("train", "val", "test", "all"):
        raise ConfigError(f"{where}.evaluate.split: unknown split {cfg.evaluate.split!r}")
    if cfg.search.budget < 1 or cfg.search.steps < 0 or cfg.benchmark.repeats < 1:
        raise ConfigError(f"{where}: search budget/steps and benchmark repeats must be positive")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config ({err.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}:{err.colno}: invalid JSON ({err.msg})") from None
    return parse_run_config(data, str(path))
