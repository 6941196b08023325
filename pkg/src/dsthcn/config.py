"""Run configuration loaded from JSON; unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .layers import ModelConfig
from .numcore import InputError
from .training import DEFAULT_FUSION_WEIGHTS, StreamKind, TrainConfig


class ConfigError(InputError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stream_weights: dict = field(
        default_factory=lambda: {k.value: w for k, w in DEFAULT_FUSION_WEIGHTS.items()}
    )
    seed: int = 0
    preprocess: bool = True
    data: str = None
    val: str = None
    out_dir: str = None

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["train"].pop("seed")
        return d


def _build(cls, raw, where, skip=()):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
    seed = int(raw.get("seed", 0))
    model = _build(ModelConfig, raw.get("model", {}), "model")
    if "seed" in raw.get("train", {}):
        raise ConfigError("set the seed at the top level, not under train")
    train = _build(TrainConfig, {**raw.get("train", {}), "seed": seed}, "train")
    weights = raw.get("stream_weights", RunConfig().stream_weights)
    bad = sorted(set(weights) - {k.value for k in StreamKind})
    if bad:
        raise ConfigError(f"unknown stream(s) in stream_weights: {', '.join(bad)}")
    rest = {k: raw[k] for k in ("preprocess", "data", "val", "out_dir") if k in raw}
    return RunConfig(model=model, train=train, stream_weights=dict(weights), seed=seed, **rest)


def load_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    return from_dict(raw)


def with_seed(cfg, seed):
    cfg.seed = seed
    cfg.train = dataclasses.replace(cfg.train, seed=seed)
    return cfg
