"""Run configuration: defaults, flat ``key=value`` files and validation."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .dataio import SYNTH_KINDS
from .tensor import DTYPES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    T: int = 2
    patch: int = 32
    batch: int = 4
    lr: float = 1e-4
    steps: int = 200
    seed: int = 0
    precision: str = "single"
    reverse1: bool = True
    reverse2: bool = True
    ddim: bool = True
    data: str = ""
    out: str = "runs/default"
    synth: str = ""
    synth_size: int = 64
    synth_count: int = 8
    width: int = 16
    blocks: int = 2
    groups: int = 4

    def __post_init__(self):
        for name in ("T", "patch", "batch", "synth_size", "synth_count", "width", "groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2 (the chain needs two states), got {self.T}")
        if self.steps < 0 or self.blocks < 0:
            raise ConfigError("steps and blocks must be non-negative")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patch % 4:
            raise ConfigError(f"patch {self.patch} must be divisible by 4 (two 2x resampling levels)")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}, got {self.precision!r}")
        if self.synth and self.synth not in SYNTH_KINDS:
            raise ConfigError(f"unknown synth kind {self.synth!r}; choose from {SYNTH_KINDS}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def updated(self, **changes) -> "RunConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def as_dict(self) -> dict:
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return replace(base or RunConfig(), **values)


def load_config(path: str | os.PathLike, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), base)


def dump_config(cfg: RunConfig) -> str:
    out = []
    for k, v in cfg.as_dict().items():
        out.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"
