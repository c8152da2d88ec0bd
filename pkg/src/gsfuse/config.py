"""Nested pipeline configuration loaded from JSON and overridden by CLI flags."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fusion import FusionConfig
from .gafeat import ConvConfig, pipeline_conv_config
from .registration import RegistrationConfig
from .skeleton import SkeletonConfig

SECTIONS = {
    "skeleton": SkeletonConfig,
    "conv": ConvConfig,
    "registration": RegistrationConfig,
    "fusion": FusionConfig,
}


@dataclass
class PipelineConfig:
    skeleton: SkeletonConfig = field(default_factory=SkeletonConfig)
    conv: ConvConfig = field(default_factory=pipeline_conv_config)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0
    threads: int = 1

    def to_dict(self) -> dict:
        return {
            **{name: getattr(self, name).to_dict() for name in SECTIONS},
            "seed": self.seed,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = set(data) - set(SECTIONS) - {"seed", "threads"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = cls()
        kwargs = {"seed": int(data.get("seed", 0)), "threads": int(data.get("threads", 1))}
        for name, klass in SECTIONS.items():
            kwargs[name] = _updated(getattr(base, name), data.get(name, {}), name)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        """Apply ``{section: {field: value}}`` overrides; ``None`` values are ignored."""
        out = dataclasses.replace(self)
        for name, values in overrides.items():
            values = {k: v for k, v in values.items() if v is not None}
            if values:
                setattr(out, name, _updated(getattr(out, name), values, name))
        return out


def _updated(obj, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {section} settings: {sorted(unknown)}")
    try:
        return dataclasses.replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section} settings: {exc}") from None
