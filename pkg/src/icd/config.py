"""Line-based ``key = value`` run configuration.

Training and distillation keys are bare field names (``lr``, ``gamma``,
``scales = 1,2,4``). Dataset keys carry a ``data.`` prefix
(``data.num_classes = 8``). ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import fields, replace
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigurationError
from .losses import DistillConfig
from .train import TrainConfig

_OPTIONAL_TYPES = {"kd_weight": float, "path": str, "student_lr": float}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(name: str, default, text: str):
    if name in _OPTIONAL_TYPES:
        if text.lower() in ("none", ""):
            return None
        return _OPTIONAL_TYPES[name](text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
    return out


def parse_config(text: str, base: tuple[TrainConfig, DatasetSpec] | None = None) -> tuple[TrainConfig, DatasetSpec]:
    train, data = base or (TrainConfig(), DatasetSpec())
    t_over, d_over, x_over = {}, {}, {}
    t_def, d_def, x_def = _defaults(TrainConfig), _defaults(DatasetSpec), _defaults(DistillConfig)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        try:
            if key.startswith("data."):
                name = key[5:]
                if name not in d_def:
                    raise KeyError(key)
                d_over[name] = _convert(name, d_def[name], value)
            elif key in x_def:
                x_over[key] = _convert(key, x_def[key], value)
            elif key in t_def:
                t_over[key] = _convert(key, t_def[key], value)
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}") from None
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    distill = replace(train.distill, **x_over)
    return replace(train, distill=distill, **t_over), replace(data, **d_over)


def load_config(path) -> tuple[TrainConfig, DatasetSpec]:
    return parse_config(Path(path).read_text())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def format_config(train: TrainConfig, data: DatasetSpec) -> str:
    """Canonical text form; ``parse_config(format_config(t, d)) == (t, d)``."""
    lines = []
    for f in fields(TrainConfig):
        if f.name != "distill":
            lines.append(f"{f.name} = {_fmt(getattr(train, f.name))}")
    for f in fields(DistillConfig):
        lines.append(f"{f.name} = {_fmt(getattr(train.distill, f.name))}")
    for f in fields(DatasetSpec):
        lines.append(f"data.{f.name} = {_fmt(getattr(data, f.name))}")
    return "\n".join(lines) + "\n"
