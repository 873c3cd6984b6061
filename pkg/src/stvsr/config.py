"""``key = value`` configuration files covering ModelConfig and TrainConfig fields.

Blank lines and ``#`` comments are ignored; unknown keys are errors. Booleans
accept true/false/yes/no/1/0.
"""

from __future__ import annotations

import dataclasses
import os

from .network import ModelConfig
from .train import TrainConfig

# model-side keys are prefixed where they would collide with training keys
MODEL_KEYS = {
    "channels": "channels",
    "k1": "k1",
    "k2": "k2",
    "scale": "scale",
    "feature_interp": "feature_interp",
    "temporal": "temporal",
    "bidirectional": "bidirectional",
    "init_seed": "seed",
}
TRAIN_KEYS = {f.name: f.name for f in dataclasses.fields(TrainConfig)}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, kind, key: str):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return raw


def _field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def parse_config(text: str, base_model: ModelConfig | None = None) -> tuple[ModelConfig, TrainConfig]:
    model_types = _field_types(ModelConfig)
    train_types = _field_types(TrainConfig)
    model_kw: dict = {}
    train_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in MODEL_KEYS:
            name = MODEL_KEYS[key]
            model_kw[name] = _coerce(value, model_types[name], key)
        elif key in TRAIN_KEYS:
            train_kw[key] = _coerce(value, train_types[key], key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    base = ModelConfig.desk() if base_model is None else base_model
    try:
        return dataclasses.replace(base, **model_kw), TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike) -> tuple[ModelConfig, TrainConfig]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)
