"""Key=value run configuration shared by every CLI command.

A config file holds one ``key = value`` per line; blank lines and ``#``
comments are ignored. Keys are the fields of :class:`ModelConfig` and
:class:`TrainConfig` plus a handful of run-level settings. Command-line flags
are applied on top, so flags always win.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .tensor import ConfigurationError
from .train import TrainConfig

PRECISIONS = {"float64": np.float64, "float32": np.float32}
MODEL_KINDS = ("davi", "baseline")


@dataclass
class RunSettings:
    """Run-level keys that are neither model nor optimiser settings."""

    model: str = "davi"
    precision: str = "float64"
    data: str = ""
    out: str = ""
    split: str = "test"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @property
    def dtype(self):
        return PRECISIONS[self.run.precision]

    def validate(self) -> None:
        self.model.validate()
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        if self.run.model not in MODEL_KINDS:
            raise ConfigurationError(f"model must be one of {MODEL_KINDS}, got {self.run.model!r}")
        if self.run.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {tuple(PRECISIONS)}")

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section in (self.run, self.model, self.train):
            out.extend((f.name, getattr(section, f.name)) for f in fields(section))
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def echo(self, out_dir, name: str = "effective_config.txt") -> Path:
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def _sections():
    return {"run": RunSettings, "model": ModelConfig, "train": TrainConfig}


def known_keys() -> dict[str, tuple[str, type]]:
    keys = {}
    for sec, cls in _sections().items():
        hints = {f.name: f.type for f in fields(cls)}
        for name, hint in hints.items():
            keys[name] = (sec, _coerce_type(hint))
    return keys


def _coerce_type(hint) -> type:
    text = hint if isinstance(hint, str) else getattr(hint, "__name__", str(hint))
    for t in (bool, int, float):
        if text == t.__name__:
            return t
    return str


def _convert(key: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key/value strings from config text, with line-numbered errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def build(file_values: dict[str, str] | None = None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Merge defaults ← config file ← flag overrides, then validate."""
    keys = known_keys()
    merged: dict[str, object] = {}
    for src in (file_values or {}, overrides or {}):
        for k, v in src.items():
            if v is None:
                continue
            if k not in keys:
                raise ConfigurationError(f"unknown config key {k!r}")
            sec, kind = keys[k]
            merged[k] = _convert(k, v, kind) if isinstance(v, str) else v
    parts = {}
    for sec, cls in _sections().items():
        kw = {k: v for k, v in merged.items() if keys[k][0] == sec}
        parts[sec] = cls(**kw)
    cfg = RunConfig(parts["model"], parts["train"], parts["run"])
    cfg.validate()
    return cfg


def load(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    file_values = {}
    if path is not None:
        file_values = parse_text(Path(path).read_text(encoding="utf-8"), str(path))
    return build(file_values, overrides)
