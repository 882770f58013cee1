"""Experiment configuration: a flat ``key = value`` text format with typed validation.

Precedence, lowest to highest: dataclass defaults, config file, command-line
overrides.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

REQUIRED = ("data", "seed", "out_dir")


class ConfigError(ValueError):
    pass


def _ratios(lo: int, hi: int) -> list[float]:
    return [round(0.1 * i, 1) for i in range(lo, hi + 1)]


@dataclass
class ExperimentConfig:
    # data source: "synthetic" or a CSV path
    data: Optional[str] = None
    seed: Optional[int] = None
    out_dir: Optional[str] = None

    synth_windows: int = 2000
    synth_length: int = 48
    synth_features: int = 5
    synth_noise_sd: float = 0.05
    synth_period_min: float = 8.0
    synth_period_max: float = 32.0
    synth_mixing: float = 0.3
    synth_irregular: bool = False

    window_length: int = 48
    stride: int = 48

    hidden_size: int = 64
    disc_hidden_size: int = 64
    n_heads: int = 4
    lambda_r: float = 10.0
    lambda_c: float = 1.0
    lr_g: float = 1e-3
    lr_d: float = 1e-4
    batch_size: int = 128
    pretrain_epochs: int = 10
    epochs: int = 30
    hint_ratio: float = 0.1
    holdout_ratio: float = 0.2
    noise_sd: float = 0.01
    grad_clip: float = 5.0
    # 0 disables discriminator weight clipping
    weight_clip: float = 0.0

    noise_search: bool = True
    search_iterations: int = 100
    search_step: float = 0.01

    use_attention: bool = True
    use_backward: bool = True

    knn_k: int = 10
    target_feature: str = ""
    downstream_ratios: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5, 0.7, 0.9])
    curve_ratios: list[float] = field(default_factory=lambda: _ratios(1, 9))
    regressor_epochs: int = 20
    regressor_hidden: int = 64

    checkpoint_every: int = 0
    log_wall_time: bool = False

    def validate(self, required: tuple[str, ...] = REQUIRED) -> "ExperimentConfig":
        for name in required:
            if getattr(self, name) in (None, ""):
                raise ConfigError(f"missing required field: {name}")
        positive = (
            "lr_g", "lr_d", "batch_size", "window_length", "stride", "hidden_size",
            "disc_hidden_size", "n_heads", "knn_k", "synth_length", "synth_features",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        nonneg = (
            "lambda_r", "lambda_c", "pretrain_epochs", "epochs", "noise_sd", "grad_clip",
            "weight_clip", "search_iterations", "search_step", "synth_windows",
            "synth_noise_sd", "regressor_epochs", "checkpoint_every",
        )
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.hint_ratio <= 1.0:
            raise ConfigError(f"hint_ratio must lie in [0, 1], got {self.hint_ratio}")
        if not 0.0 <= self.holdout_ratio < 1.0:
            raise ConfigError(f"holdout_ratio must lie in [0, 1), got {self.holdout_ratio}")
        for name in ("downstream_ratios", "curve_ratios"):
            for r in getattr(self, name):
                if not 0.0 <= r < 1.0:
                    raise ConfigError(f"{name} entries must lie in [0, 1), got {r}")
        if self.window_length < 2:
            raise ConfigError("window_length must be >= 2")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str) -> Any:
    f = _FIELDS.get(name)
    if f is None:
        raise ConfigError(f"unknown config key: {name}")
    kind = f.type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int" or kind == "Optional[int]":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "list[float]":
            return [float(x) for x in raw.split(",") if x.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str) -> dict[str, Any]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[dict[str, str]] = None
) -> ExperimentConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    for k, v in (overrides or {}).items():
        values[k] = _coerce(k, v) if isinstance(v, str) else v
    return ExperimentConfig(**values)


def derive_seed(root: int, name: str) -> int:
    """Child seed for one named random stream of a run."""
    seq = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)
