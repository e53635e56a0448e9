"""Run configuration: flat ``key = value`` files with ``#`` comments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

from .rsl import PiecewiseEpochMap, Termination
from .synthetic import SyntheticSpec

MODES = ("conventional", "rsl")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    input_size: Tuple[int, int] = (64, 64)
    learning_rate: float = 0.01
    batch_size: int = 20
    max_epochs: int = 150
    seed: int = 0
    piecewise_map: PiecewiseEpochMap = field(default_factory=PiecewiseEpochMap)
    mode: str = "rsl"
    # data source: a manifest path, or synthetic data when unset
    manifest: Optional[Path] = None
    train_per_class: int = 200
    val_per_class: int = 50
    synthetic_size: Tuple[int, int] = (128, 128)
    # termination extras (0 / unset disables)
    plateau_window: int = 0
    plateau_delta: float = 0.001
    target_train_error: Optional[float] = None
    # write 0 in the wall-clock column so CSVs can be compared byte for byte
    record_wall_clock: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.input_size) < 1 or min(self.synthetic_size) < 1:
            raise ConfigError("sizes must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("batch_size", "max_epochs", "train_per_class", "val_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.plateau_window < 0 or self.plateau_delta < 0:
            raise ConfigError("plateau settings must be non-negative")
        if self.target_train_error is not None and not 0 <= self.target_train_error <= 1:
            raise ConfigError("target_train_error must lie in [0, 1]")

    def termination(self) -> Termination:
        return Termination(
            max_epochs=self.max_epochs,
            plateau_window=self.plateau_window or None,
            plateau_delta=self.plateau_delta,
            target_train_error=self.target_train_error,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(image_size=self.synthetic_size, seed=self.seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = "x".join(str(v) for v in value)
            elif isinstance(value, PiecewiseEpochMap):
                value = value.format()
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _size(text: str) -> Tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_PARSERS = {
    "input_size": _size,
    "learning_rate": float,
    "batch_size": int,
    "max_epochs": int,
    "seed": int,
    "piecewise_map": PiecewiseEpochMap.parse,
    "mode": str,
    "manifest": Path,
    "train_per_class": int,
    "val_per_class": int,
    "synthetic_size": _size,
    "plateau_window": int,
    "plateau_delta": float,
    "target_train_error": float,
    "record_wall_clock": _bool,
}


def parse_config(text: str, base_dir: Union[str, Path, None] = None) -> RunConfig:
    """Parse config text; unknown or repeated keys are errors.

    A relative ``manifest`` path resolves against ``base_dir``.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if "manifest" in values and base_dir is not None and not values["manifest"].is_absolute():
        values["manifest"] = Path(base_dir) / values["manifest"]
    return RunConfig(**values)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
