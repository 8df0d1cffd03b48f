"""Flat run configuration files.

One ``dotted.key = value`` per line, ``#`` starts a comment. Values are
Python literals (numbers, strings, tuples, lists, booleans); bare words are
read as strings. Environment variables ``SETDINO_<KEY>`` override file
values, with ``__`` standing for a dot: ``SETDINO_TRAIN__BASE_LR=1e-3``.
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
import os
from pathlib import Path

from . import encoder, synthgen, trainer
from .errors import ConfigError, StorageError

ENV_PREFIX = "SETDINO_"

DEFAULTS = {
    "dataset.cells_per_guide_per_batch": 16,
    "dataset.seed": 0,
    "embed.normalization": "ntc_zscore",
    "embed.batch_size": 512,
    "embed.engineered_pca_cutoff": 0.95,
    "evaluate.k": 5,
    "evaluate.percentiles": list(range(1, 21)),
    "evaluate.pca_components": None,
    "ablate.arms": ["cross_batch:8", "within_batch:4", "cross_batch:1"],
    "ablate.seeds": [0],
    "ablate.workers": 1,
    "ablate.collapse_fraction": 0.05,
}


def _dataclass_defaults(prefix, obj):
    out = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            out.update(_dataclass_defaults(f"{prefix}{f.name}.", val))
        else:
            out[f"{prefix}{f.name}"] = val
    return out


def default_config() -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(_dataclass_defaults("world.", synthgen.WorldConfig()))
    cfg.update(_dataclass_defaults("train.", trainer.TrainConfig()))
    return cfg


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def env_overrides(env=None) -> dict:
    env = os.environ if env is None else env
    out = {}
    for name, value in env.items():
        if name.startswith(ENV_PREFIX) and len(name) > len(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            out[key] = parse_value(value)
    return out


def load_config(path=None, env=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then environment, then explicit overrides."""
    cfg = default_config()
    layers = []
    if path is not None:
        try:
            layers.append(parse_text(Path(path).read_text(), str(path)))
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc}") from exc
    layers.append(env_overrides(env))
    layers.append(overrides or {})
    for layer in layers:
        for key, value in layer.items():
            if key not in cfg:
                raise ConfigError(key, "unknown configuration key")
            cfg[key] = value
    world_config(cfg).validate()
    train_config(cfg).validate()
    return cfg


def _section(cfg, prefix):
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def _build(cls, values, prefix):
    try:
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in values:
                v = values[f.name]
                kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(prefix.rstrip("."), str(exc)) from exc


def world_config(cfg: dict) -> synthgen.WorldConfig:
    return _build(synthgen.WorldConfig, _section(cfg, "world."), "world.")


def train_config(cfg: dict) -> trainer.TrainConfig:
    values = _section(cfg, "train.")
    model = _build(encoder.ViTConfig, {k[6:]: v for k, v in values.items() if k.startswith("model.")},
                   "train.model.")
    tc = _build(trainer.TrainConfig, {k: v for k, v in values.items() if not k.startswith("model.")},
                "train.")
    tc.model = model
    return tc


def _canonical(value):
    if isinstance(value, tuple):
        return [_canonical(v) for v in value]
    if isinstance(value, list):
        return [_canonical(v) for v in value]
    return value


def config_hash(cfg: dict, keys=None) -> str:
    """SHA-256 of the canonical JSON of ``cfg`` (restricted to ``keys`` prefixes)."""
    items = {k: _canonical(v) for k, v in cfg.items()
             if keys is None or any(k.startswith(p) for p in keys)}
    return hashlib.sha256(json.dumps(items, sort_keys=True).encode()).hexdigest()


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {_canonical(v)!r}\n" for k, v in sorted(cfg.items()))
