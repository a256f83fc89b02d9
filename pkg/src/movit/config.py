"""Flat ``key = value`` run configuration.

Keys mirror :class:`ViTConfig`, :class:`TrainConfig` and the synthetic data
spec; ``#`` starts a comment.  Unknown keys and untypeable values raise
:class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SyntheticDatasetSpec
from .train import TrainConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    samples_per_class: int = 200
    test_per_class: int = 50
    noise_std: float = 0.3
    generator: str = "textures"
    data_seed: int = 0
    data_path: str = ""
    test_path: str = ""


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def synthetic_spec(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(self.vit.num_classes, self.data.samples_per_class, self.vit.image_size,
                                    self.data.noise_std, self.data.data_seed, self.data.generator,
                                    self.vit.in_channels)

    def to_dict(self) -> dict:
        return {**{f.name: getattr(self.vit, f.name) for f in fields(ViTConfig)},
                **{f.name: getattr(self.train, f.name) for f in fields(TrainConfig)},
                **{f.name: getattr(self.data, f.name) for f in fields(DataConfig)}}


_SECTIONS = {"vit": ViTConfig, "train": TrainConfig, "data": DataConfig}
_KEYS = {f.name: (section, cls().__getattribute__(f.name))
         for section, cls in _SECTIONS.items() for f in fields(cls)}


def _coerce(key: str, raw):
    default = _KEYS[key][1]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if key == "movit_layer":
        return None if text.lower() in ("none", "off", "") else int(text)
    if isinstance(default, bool):
        if text.lower() in ("true", "on", "yes", "1"):
            return True
        if text.lower() in ("false", "off", "no", "0"):
            return False
        raise ValueError(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def build_config(values: dict) -> RunConfig:
    """Typed :class:`RunConfig` from a mapping of flat keys (strings or typed values)."""
    grouped: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, raw in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            grouped[_KEYS[key][0]][key] = _coerce(key, raw)
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None
    try:
        return RunConfig(**{name: cls(**grouped[name]) for name, cls in _SECTIONS.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(p)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
