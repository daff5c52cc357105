"""Flat ``key=value`` run configuration with presets and flag overrides.

Resolution order, lowest to highest precedence: built-in defaults, preset
defaults, config file, command-line flags.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from ..data import resolve_data_dir
from ..engine import SearchConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


CHOICES = {
    "scope": ("s", "m", "l", "f"),
    "preset": ("none", "desk"),
    "dataset": ("auto", "cifar10", "synthetic"),
    "dtype": ("float32", "float64"),
}


@dataclass
class RunConfig:
    command: str = "search"
    # search and model
    scope: str = "s"
    epochs: int = 500
    seed: int = 0
    batch_size: int = 64
    weight_lr: float = 0.05
    weight_momentum: float = 0.9
    weight_decay: float = 4e-5
    arch_lr: float = 0.001
    arch_beta1: float = 0.9
    arch_beta2: float = 0.999
    arch_eps: float = 1e-8
    arch_weight_decay: float = 0.0
    weight_batches: int = 1
    arch_batches: int = 1
    warmup_epochs: int = 0
    stop_patience: int = 20
    stop_threshold: float = 0.9
    early_stop: bool = True
    num_classes: int = 10
    image_size: int = 224
    small_stem: bool = False
    width_divisor: int = 1
    dtype: str = "float32"
    retrain_epochs: int = 0  # 0: same as epochs
    # data
    preset: str = "none"
    dataset: str = "auto"
    data_dir: str = ""
    subset: int = 0  # 0: all images
    train_fraction: float = 0.8
    flip_prob: float = 0.5
    crop_scale_min: float = 0.08
    synthetic_size: int = 2000
    synthetic_noise: float = 0.5
    # output
    out: str = "runs/latest"

    def search_config(self) -> SearchConfig:
        names = {f.name for f in fields(SearchConfig)}
        return SearchConfig(**{k: v for k, v in vars(self).items() if k in names})

    def resolved_dataset(self) -> str:
        if self.dataset != "auto":
            return self.dataset
        if self.preset == "desk" and resolve_data_dir(self.data_dir or None) is None:
            return "synthetic"
        return "cifar10"

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "command":
                continue
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


PRESETS: dict[str, dict[str, Any]] = {
    "none": {},
    "desk": {
        "image_size": 32,
        "small_stem": True,
        "width_divisor": 16,
        "subset": 2000,
        "epochs": 2,
        "synthetic_size": 2000,
    },
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}
KEYS = tuple(name for name in _TYPES if name != "command")


def coerce(key: str, raw: Any) -> Any:
    if key not in _TYPES or key == "command":
        raise ConfigError(f"unknown configuration key {key!r}")
    kind = _TYPES[key]
    try:
        if isinstance(raw, str):
            if kind == "bool":
                value = _parse_bool(raw)
            elif kind == "int":
                value = int(raw.strip())
            elif kind == "float":
                value = float(raw.strip())
            else:
                value = raw.strip()
        else:
            value = {"bool": bool, "int": int, "float": float, "str": str}[kind](raw)
    except ValueError:
        raise ConfigError(f"configuration key {key!r} expects {kind}, got {raw!r}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"configuration key {key!r} must be one of {CHOICES[key]}, got {value!r}")
    return value


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def parse_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    command: str = "search",
) -> RunConfig:
    explicit: dict[str, Any] = {}
    if path is not None:
        for key, raw in read_config_file(path).items():
            explicit[key] = coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if raw is not None:
            explicit[key] = coerce(key, raw)

    preset = explicit.get("preset", "none")
    values = dict(PRESETS[preset])
    values.update(explicit)
    config = RunConfig(command=command, **values)

    if config.dataset == "synthetic" and config.data_dir:
        raise ConfigError("both dataset sources specified: dataset=synthetic and a data directory")
    if config.epochs < 1:
        raise ConfigError("epochs must be at least 1")
    if config.batch_size < 1:
        raise ConfigError("batch_size must be positive")
    if not 0 < config.train_fraction < 1:
        raise ConfigError("train_fraction must lie strictly between 0 and 1")
    try:
        config.search_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return config
