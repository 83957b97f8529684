"""Flat ``key=value`` run configuration with ``#`` comments.

Model keys are the fields of :class:`ModelConfig`; the remaining keys
describe data, training and inference. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .events import DEFAULT_THRESHOLD
from .model import ModelConfig


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    data_dir: str = "data"
    n_frames: int = 20
    n_objects: int = 1
    rate_hz: float = 20.0
    threshold: float = DEFAULT_THRESHOLD  # event contrast threshold
    max_speed: float = 1.0  # pixels per frame
    window_s: float = 0.05
    stride_s: float = 0.0125
    train_steps: int = 500
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.05
    milestones: tuple = ()  # learning-rate drops, in steps
    gamma: float = 0.1
    energy_frames: int = 4

    def __post_init__(self):
        if self.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        if self.train_steps < 0 or self.batch_size < 1:
            raise ConfigError("train_steps must be >= 0 and batch_size >= 1")
        if not (self.window_s > 0 and self.stride_s > 0):
            raise ConfigError("window_s and stride_s must be > 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")

    @property
    def seed(self) -> int:
        return self.model.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, seed=seed))

    def to_text(self) -> str:
        return self.run_text() + self.model.to_text()

    def run_text(self) -> str:
        """Only the non-model keys."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "model":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(str(x) for x in v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        kv = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key = key.strip()
            if key in kv:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            kv[key] = value.strip()
        return cls.from_mapping(kv)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    @classmethod
    def from_mapping(cls, kv: dict) -> "RunConfig":
        run_fields = {f.name for f in dataclasses.fields(cls)} - {"model"}
        model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
        unknown = set(kv) - run_fields - model_fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig.from_mapping({k: v for k, v in kv.items() if k in model_fields})
        defaults = cls()
        run = {k: _coerce_run(k, v, getattr(defaults, k)) for k, v in kv.items() if k in run_fields}
        return dataclasses.replace(defaults, model=model, **run)


def _coerce_run(key, raw, proto):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(proto, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return type(proto)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def echo_lines(config: RunConfig) -> list:
    """``# key=value`` provenance lines for CSV and text artifacts."""
    return [f"# {line}" for line in config.to_text().splitlines()]
