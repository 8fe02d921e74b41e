"""Configuration records for the model, training stages and CLI runs."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

DEFAULT_LATENT_COUNTS = (4, 16, 64, 144, 256)
MAX_TEXT_LEN = 256
DEFAULT_WINDOW = 3
DEFAULT_LAMBDA = 0.1


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    num_layers: int = 4
    vision_dim: int = 16
    text_dim: int = 32
    patch_grid: int = 4
    num_heads: int = 2
    max_text_len: int = MAX_TEXT_LEN
    image_size: int = 16
    channels: int = 3
    ffn_mult: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_layers < 2 or self.num_layers % 2:
            raise ConfigError(f"encoder num_layers must be even and positive, got {self.num_layers}")
        for name in ("vision_dim", "text_dim"):
            if getattr(self, name) % self.num_heads:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by num_heads={self.num_heads}")
        if self.image_size % self.patch_grid:
            raise ConfigError("image_size must be divisible by patch_grid")
        if self.image_size % 2:
            raise ConfigError("image_size must be even so the image splits into quadrants")

    @property
    def patch_size(self) -> int:
        return self.image_size // self.patch_grid

    @property
    def num_patches(self) -> int:
        return self.patch_grid ** 2


def default_interaction_layers(num_layers: int) -> tuple[int, ...]:
    step = math.ceil(num_layers / 2)
    return tuple(range(step, num_layers + 1, step))


@dataclass
class DecoderConfig:
    num_layers: int = 4
    model_dim: int = 32
    num_heads: int = 2
    vocab_size: int = 64
    window: int = DEFAULT_WINDOW
    latent_counts: tuple[int, ...] = DEFAULT_LATENT_COUNTS
    interaction_layers: tuple[int, ...] | None = None
    ffn_mult: int = 2

    def __post_init__(self):
        self.latent_counts = tuple(int(c) for c in self.latent_counts)
        if self.interaction_layers is None:
            self.interaction_layers = default_interaction_layers(self.num_layers)
        self.interaction_layers = tuple(sorted(set(int(i) for i in self.interaction_layers)))
        self.validate()

    def validate(self):
        if self.model_dim % self.num_heads:
            raise ConfigError("model_dim not divisible by num_heads")
        if self.window < 1:
            raise ConfigError("window must be a positive integer")
        if not self.latent_counts:
            raise ConfigError("latent_counts must be non-empty")
        for c in self.latent_counts:
            if c < 1 or math.isqrt(c) ** 2 != c:
                raise ConfigError(f"latent count {c} is not a perfect square")
        for i in self.interaction_layers:
            if not 1 <= i <= self.num_layers:
                raise ConfigError(f"interaction layer {i} outside 1..{self.num_layers}")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size too small for the reserved tokens")


@dataclass
class StageConfig:
    name: str = "stage1"
    peak_lr: float = 1e-4
    batch_size: int = 8
    steps: int = 100
    schedule: str = "cosine"
    all_params_trainable: bool = True
    # template mix: caption / qa / instruction weights
    template_mix: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {self.name!r}")
        if self.schedule != "cosine":
            raise ConfigError("only the cosine schedule is supported")
        if not self.all_params_trainable:
            raise ConfigError("all parameters are trained in every stage")
        self.template_mix = tuple(float(x) for x in self.template_mix)


STAGE_NAMES = ("stage1", "stage1_5", "stage2")


def default_stages() -> dict[str, StageConfig]:
    # desk-scale batch sizes; peak learning rates as published
    return {
        "stage1": StageConfig("stage1", peak_lr=1e-4, batch_size=8, steps=100, template_mix=(1.0, 0.0, 0.0)),
        "stage1_5": StageConfig("stage1_5", peak_lr=2e-5, batch_size=4, steps=100, template_mix=(0.2, 0.6, 0.2)),
        "stage2": StageConfig("stage2", peak_lr=1e-5, batch_size=4, steps=100, template_mix=(0.0, 0.3, 0.7)),
    }


@dataclass
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 0
    clip_norm: float = 1.0
    loss_lambda: float = DEFAULT_LAMBDA
    dataset_size: int = 32


@dataclass
class GradcheckConfig:
    eps: float = 1e-5
    subsample: int = 8
    tolerance: float = 1e-4
    latent_counts: tuple[int, ...] = (4, 16)
    corrupt_group: str | None = None

    def __post_init__(self):
        self.latent_counts = tuple(int(c) for c in self.latent_counts)


@dataclass
class RunConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    stages: dict[str, StageConfig] = field(default_factory=default_stages)
    train: TrainConfig = field(default_factory=TrainConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    global_tokens: int | None = None
    thresholds: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.decoder.model_dim != self.encoder.text_dim:
            raise ConfigError("decoder model_dim must equal encoder text_dim")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        data = dict(data)
        _reject_unknown(cls, data, "run config")
        kwargs: dict[str, Any] = {}
        for key, sub in (("encoder", EncoderConfig), ("decoder", DecoderConfig),
                         ("train", TrainConfig), ("gradcheck", GradcheckConfig)):
            if key in data:
                _reject_unknown(sub, data[key], key)
                kwargs[key] = sub(**data.pop(key))
        if "stages" in data:
            stages = default_stages()
            for name, overrides in data.pop("stages").items():
                if name not in STAGE_NAMES:
                    raise ConfigError(f"unknown stage {name!r}")
                _reject_unknown(StageConfig, overrides, f"stages.{name}")
                merged = {**dataclasses.asdict(stages[name]), **overrides, "name": name}
                stages[name] = StageConfig(**merged)
            kwargs["stages"] = stages
        if "thresholds" in data:
            from .filtering import FilterThresholds
            th = data.pop("thresholds")
            _reject_unknown(FilterThresholds, th, "thresholds")
            kwargs["thresholds"] = {k: float(v) for k, v in th.items()}
        kwargs.update(data)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _reject_unknown(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
