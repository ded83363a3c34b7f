"""Flat dotted-key run configuration with presets.

File syntax is one ``section.key = value`` per line; ``#`` starts a comment.
Values are Python literals (numbers, ``true``/``false``, quoted strings,
comma-separated lists); bare words are kept as strings.
"""

from __future__ import annotations

import ast
from dataclasses import fields
from pathlib import Path

from .losses import LossWeights
from .model import PRESETS as MODEL_PRESETS
from .model import ModelConfig
from .training import TrainConfig


def _section(prefix: str, obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if f.name in ("weights", "seed"):
            continue
        out[f"{prefix}.{f.name}"] = list(v) if isinstance(v, tuple) else v
    return out


def _base() -> dict:
    cfg = {
        "seed": 0,
        "data.n_cases": 200,
        "data.conditions_per_design": 2,
        "data.resolution": 512,
        "data.split": [0.8, 0.1, 0.1],
        "data.mach": 0.0,
        "eval.resolutions": [512, 1024],
        "probe.folds": 5,
        "walk.gammas": [-3.0, 3.0, 13],
        "interp.steps": 11,
        "optimize.restarts": 8,
        "optimize.alpha_cruise": 0.1,
        "optimize.mach_cruise": 0.0,
        "optimize.tau_quantile": 0.95,
        "optimize.cov_reg": 1e-6,
        "optimize.prox_weight": 0.05,
        "optimize.neighbourhood": 0.5,
    }
    cfg.update(_section("model", ModelConfig()))
    cfg.update(_section("train", TrainConfig()))
    cfg.update({f"loss.{f.name}": getattr(LossWeights(), f.name) for f in fields(LossWeights)})
    return cfg


PRESETS = {
    "desk": {},
    "paper": {
        **_section("model", MODEL_PRESETS["paper"]),
        "train.epochs": 300,
        "train.n_context": 8192,
        "train.n_target": 8192,
        "train.n_query": 8192,
        "data.resolution": 16384,
        "eval.resolutions": [16384],
    },
}


def defaults(preset: str = "desk") -> dict:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = _base()
    cfg.update(PRESETS[preset])
    return cfg


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        val = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    return list(val) if isinstance(val, tuple) else val


def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key] = _parse_value(value)
    return out


def format_config(cfg: dict) -> str:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif v is None:
            s = "none"
        elif isinstance(v, (list, tuple)):
            s = ", ".join(repr(x) for x in v)
            if len(v) == 1:
                s += ","
        elif isinstance(v, str):
            s = repr(v)
        else:
            s = repr(v)
        lines.append(f"{k} = {s}")
    return "\n".join(lines) + "\n"


def load_config(path=None, preset: str = "desk", overrides: dict = None) -> dict:
    """Preset defaults, updated by the file, then by ``overrides``; unknown keys are rejected."""
    cfg = defaults(preset)
    layers = []
    if path is not None:
        layers.append(parse_config(Path(path).read_text()))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        cfg.update(layer)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**{f.name: cfg[f"model.{f.name}"] for f in fields(ModelConfig)})


def train_config(cfg: dict) -> TrainConfig:
    weights = LossWeights(**{f.name: cfg[f"loss.{f.name}"] for f in fields(LossWeights)})
    kw = {f.name: cfg[f"train.{f.name}"] for f in fields(TrainConfig) if f.name not in ("weights", "seed")}
    kw["seed"] = cfg["seed"]
    return TrainConfig(weights=weights, **kw)
