"""Flat run configuration shared by the command-line subcommands."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .checkpoint import config_digest
from .encoders import EncoderConfig
from .objective import LossConfig
from .trainer import TrainConfig

PATH_FIELDS = ("data", "suite", "init", "out", "metrics")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # encoder
    d: int = 32
    layers: int = 2
    heads: int = 4
    W_max: int = 16
    G: int = 4
    mlp_ratio: int = 4
    # loss
    lambda_g: float = 0.5
    lambda_l: float = 0.2
    gamma: float = 2.0
    beta: float = 0.02
    norm_mode: str = "minmax"
    temperature_init: float = 0.07
    # optimization
    batch_size: int = 64
    steps: int = 2000
    lr: float = 3e-4
    warmup_steps: int = 50
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    phase: str = "pretrain_contrastive"
    sigma: float = 0.05
    # data generation
    n_train: int = 2000
    n_eval: int = 500
    # paths
    data: str | None = None
    suite: str | None = None
    init: str | None = None
    out: str | None = None
    metrics: str | None = None

    def __post_init__(self):
        # building the component configs runs their validation
        try:
            self.encoder_config()
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be positive")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d=self.d, layers=self.layers, heads=self.heads, W_max=self.W_max, G=self.G, mlp_ratio=self.mlp_ratio)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda_g=self.lambda_g,
            lambda_l=self.lambda_l,
            gamma=self.gamma,
            beta=self.beta,
            norm_mode=self.norm_mode,
            temperature_init=self.temperature_init,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            steps=self.steps,
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            weight_decay=self.weight_decay,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            phase=self.phase,
            sigma=self.sigma,
            loss=self.loss_config(),
        )

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def digest(self) -> str:
        """FNV-1a digest of every field except file paths."""
        return config_digest({k: v for k, v in self.to_json().items() if k not in PATH_FIELDS})


def field_types() -> dict:
    hints = {"int": int, "float": float, "str": str, "str | None": str}
    return {f.name: hints[f.type] for f in fields(RunConfig)}


def _coerce(name, value, kind):
    if value is None:
        return None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def build(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge config-file values with overrides (overrides win; ``None`` means unset)."""
    types = field_types()
    merged = {}
    for source in (file_values or {}, overrides or {}):
        unknown = sorted(set(source) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in source.items():
            if v is not None:
                merged[k] = _coerce(k, v, types[k])
    return RunConfig(**merged)


def load_file(path) -> dict:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return obj
