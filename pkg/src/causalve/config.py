"""Pipeline configuration: nested dataclasses serialized as one JSON file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ValidationError

DATA_ROOT_ENV = "CAUSALVE_DATA_ROOT"


@dataclass
class DataConfig:
    size: tuple = (32, 32)
    frames: int = 8
    fps: float = 25.0
    channels: int = 3
    n_mel: int = 16
    clips: int = 16
    seed: int = 0


@dataclass
class SwapConfig:
    steps: int = 100            # T_diff
    ramp: int = 50              # T_hat
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    widths: tuple = (16, 32, 64)


@dataclass
class AnimConfig:
    shape_dim: int = 64
    id_dim: int = 8
    expr_dim: int = 8
    latent: int = 16
    w3d: float = 2.0
    w2d: float = 0.01
    rebuild: float = 1.0
    kl: float = 0.7


@dataclass
class PredictConfig:
    widths: tuple = (32, 64)
    depth: int = 2
    heads: int = 4
    window: tuple = (2, 4, 4)
    shift: tuple = (1, 2, 2)


@dataclass
class DecideConfig:
    mu: float = 0.05
    lambda_ce: float = 3.0
    classes: int = 4
    mse_bins: tuple = (1e-3, 4e-3, 1.6e-2)
    exit_threshold: float = 0.5
    normalize: bool = False


@dataclass
class HideConfig:
    group: int = 3
    n_blocks: int = 4
    hidden: int = 16
    growth: int = 8
    clamp: float = 2.0
    lambda_b: float = 2.0
    cf_mode: str = "triangular"
    residual_mode: str = "attach"
    train_residual: str = "discard"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    halve_every: int = 25000
    batch: int = 4
    grad_clip: float = 1.0
    seed: int = 0
    steps: dict = field(default_factory=lambda: {
        "swap": 400, "anim": 400, "predict": 300, "decide": 300, "hide": 4000})
    stage_lr: dict = field(default_factory=lambda: {"hide": 5e-4})
    augment: bool = True

    def lr_for(self, stage: str) -> float:
        return self.stage_lr.get(stage, self.lr)


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    swap: SwapConfig = field(default_factory=SwapConfig)
    anim: AnimConfig = field(default_factory=AnimConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    decide: DecideConfig = field(default_factory=DecideConfig)
    hide: HideConfig = field(default_factory=HideConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint_dir: str = "checkpoints"
    data_root: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        h, w = self.data.size
        if h % 2 or w % 2:
            raise ValidationError(f"frame size must be even, got {self.data.size}")
        if self.data.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")
        if self.swap.ramp <= 0 or self.swap.steps <= 0:
            raise ValidationError("diffusion steps and ramp must be positive")
        if self.decide.mu <= 0:
            raise ValidationError("decision threshold mu must be positive")
        if self.hide.lambda_b < 0:
            raise ValidationError("lambda_b must be non-negative")
        if self.hide.residual_mode not in ("attach", "discard"):
            raise ValidationError(f"unknown residual mode {self.hide.residual_mode!r}")
        if self.train.lr <= 0 or self.train.halve_every <= 0:
            raise ValidationError("learning rate and halving interval must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        kwargs = {}
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ValidationError(f"unknown config section {key!r}")
            sub = _section_types.get(key)
            kwargs[key] = _build(sub, value, key) if sub else value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON config ({exc})") from exc

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def resolved_data_root(self) -> Path | None:
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        return Path(root) if root else None


_section_types = {"data": DataConfig, "swap": SwapConfig, "anim": AnimConfig,
                  "predict": PredictConfig, "decide": DecideConfig, "hide": HideConfig,
                  "train": TrainConfig}


def _build(cls, value: dict, name: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(value) - set(fields)
    if unknown:
        raise ValidationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    out = {}
    for k, v in value.items():
        default = getattr(cls(), k)
        out[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    return cls(**out)


def lr_at(step: int, lr0: float, halve_every: int) -> float:
    """Step-decay schedule ``lr0 * 2 ** -(step // halve_every)``."""
    if step < 0:
        raise ValidationError("step must be non-negative")
    return lr0 * 2.0 ** (-(step // halve_every))
