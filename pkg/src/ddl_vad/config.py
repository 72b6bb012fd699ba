"""Configuration dataclasses and the named hyperparameter profiles."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class HyperParams:
    heads: int = 4
    hidden_dim: int = 32  # D_h, split evenly across heads
    sigma: float = 6.0  # locality prior width
    use_prior: bool = True
    mlp_dims: tuple[int, int] = (64, 16)
    dropout: float = 0.1
    kernel_size: int = 5
    lambda1: float = 1.0
    lambda2: float = 1.0
    zeta: float = 0.0
    epsilon: float = 1e-7
    literal_mil: bool = False  # positive-only log term, as printed for the MIL loss

    def validate(self):
        if self.heads < 1 or self.hidden_dim < 1:
            raise ConfigError("heads and hidden_dim must be positive")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide hidden_dim ({self.hidden_dim})")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if len(self.mlp_dims) != 2 or min(self.mlp_dims) < 1:
            raise ConfigError("mlp_dims needs two positive widths")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.zeta < 0:
            raise ConfigError("lambda1, lambda2 and zeta must be non-negative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 8  # bags per step, half positive and half negative
    epochs: int = 50
    seed: int = 7
    t_max: int = 40
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 0  # 0 = final checkpoint only

    def validate(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.t_max < 2:
            raise ConfigError("t_max must be >= 2")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("invalid Adam settings")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")


@dataclass
class SynthSpec:
    seed: int = 7
    normal_videos: int = 50
    anomaly_videos: int = 50
    test_fraction: float = 0.2
    t_min: int = 30
    t_max_len: int = 60
    dim: int = 32
    segments_min: int = 1
    segments_max: int = 2
    segment_len_min: int = 4
    segment_len_max: int = 12
    jump: float = 1.5  # per-coordinate RMS of the shift at segment boundaries
    noise: float = 0.3  # per-coordinate innovation scale of the background walk
    scene_spread: float = 0.5  # per-coordinate std of each video's base point
    snippet_noise: float = 0.5  # i.i.d. per-snippet observation noise
    direction_jitter: float = 0.0  # per-segment perturbation of the shared anomaly direction
    anomaly_types: int = 3

    def validate(self):
        if self.normal_videos < 0 or self.anomaly_videos < 0:
            raise ConfigError("video counts must be >= 0")
        if self.normal_videos + self.anomaly_videos == 0:
            raise ConfigError("at least one video is required")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in [0, 1)")
        if not 2 <= self.t_min <= self.t_max_len:
            raise ConfigError("need 2 <= t_min <= t_max_len")
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if not 1 <= self.segments_min <= self.segments_max:
            raise ConfigError("need 1 <= segments_min <= segments_max")
        if not 1 <= self.segment_len_min <= self.segment_len_max:
            raise ConfigError("need 1 <= segment_len_min <= segment_len_max")
        if self.segment_len_max > self.t_min:
            raise ConfigError(
                f"infeasible spec: segments up to {self.segment_len_max} snippets do not fit in t_min={self.t_min}"
            )
        if self.noise < 0 or self.jump <= max(self.noise, self.snippet_noise):
            raise ConfigError("jump must exceed the noise levels")
        if min(self.scene_spread, self.snippet_noise, self.direction_jitter) < 0:
            raise ConfigError("scene_spread, snippet_noise and direction_jitter must be >= 0")
        if self.anomaly_types < 1:
            raise ConfigError("anomaly_types must be >= 1")


PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "desk": {"model": {}, "train": {}},
    "ucf": {
        "model": {
            "heads": 4, "hidden_dim": 512, "sigma": 16.0, "kernel_size": 10,
            "mlp_dims": (512, 128), "lambda1": 1.0, "lambda2": 1.0,
        },
        "train": {"batch_size": 128, "epochs": 50, "t_max": 200, "lr": 5e-4},
    },
    "xd": {
        "model": {
            "heads": 4, "hidden_dim": 128, "sigma": 6.0, "kernel_size": 5,
            "mlp_dims": (512, 128), "lambda1": 2.0, "lambda2": 1.0,
        },
        "train": {"batch_size": 128, "epochs": 50, "t_max": 200, "lr": 5e-4},
    },
}

SECTIONS = {"model": HyperParams, "train": TrainConfig, "synth": SynthSpec}


@dataclass
class RunConfig:
    profile: str = "desk"
    model: HyperParams = field(default_factory=HyperParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(cls, name, value):
    default = next(f for f in dataclasses.fields(cls) if f.name == name).default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{cls.__name__}.{name} must be a boolean")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{cls.__name__}.{name} must be a list of integers")
        return tuple(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{cls.__name__}.{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{cls.__name__}.{name} must be a number")
        return float(value)
    return value


def _apply(obj, values: dict, where: str):
    known = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown field {where}.{key}")
        setattr(obj, key, _coerce(type(obj), key, value))


def resolve(profile: str | None = None, file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults <- profile <- config file <- overrides and validate.

    ``file_values`` is the nested JSON layout of :class:`RunConfig`;
    ``overrides`` is the same layout, typically built from command-line flags.
    """
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    for layer in (file_values, overrides):
        unknown = set(layer) - set(SECTIONS) - {"profile"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for section in SECTIONS:
            if section in layer and not isinstance(layer[section], dict):
                raise ConfigError(f"config section {section!r} must be an object")

    name = overrides.get("profile") or profile or file_values.get("profile") or "desk"
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}")
    cfg = RunConfig(profile=name)
    for section, values in PROFILES[name].items():
        _apply(getattr(cfg, section), values, section)
    for layer in (file_values, overrides):
        for section in SECTIONS:
            _apply(getattr(cfg, section), layer.get(section, {}), section)
    return cfg.validate()


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def hyperparams_from_dict(values: dict) -> HyperParams:
    hp = HyperParams()
    _apply(hp, values, "model")
    hp.validate()
    return hp
