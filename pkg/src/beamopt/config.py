"""Run configuration: one JSON file mapping onto the per-module configs.

The file holds up to five sections (engine, env, dqn, client, eval), each a
flat object whose keys are the corresponding dataclass fields. Unknown
sections or keys are rejected by name instead of silently ignored, since a
typo like "ray_spacing" quietly falling back to the default is the kind of
bug nobody notices until the numbers are wrong.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .agents.dqn import DqnHyperparams
from .dose import EngineConfig
from .env import EnvConfig
from .evaluation import EvalSettings
from .llm import ClientConfig

__all__ = ["ConfigError", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """A config file could not be read or contains bad keys or values."""


_SECTIONS = {
    "engine": EngineConfig,
    "env": EnvConfig,
    "dqn": DqnHyperparams,
    "client": ClientConfig,
    "eval": EvalSettings,
}


@dataclass(frozen=True)
class RunConfig:
    engine: EngineConfig = EngineConfig()
    env: EnvConfig = EnvConfig()
    dqn: DqnHyperparams = DqnHyperparams()
    client: ClientConfig = ClientConfig()
    eval: EvalSettings = EvalSettings()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be an object, got {type(data).__name__}")
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section {unknown[0]!r}")
        kwargs = {}
        for section, section_cls in _SECTIONS.items():
            if section not in data:
                continue
            body = data[section]
            if not isinstance(body, dict):
                raise ConfigError(f"section {section!r} must be an object")
            field_map = {f.name: f for f in dataclasses.fields(section_cls)}
            for key in body:
                if key not in field_map:
                    raise ConfigError(f"unknown config key {section}.{key}")
            values = {}
            for key, value in body.items():
                # JSON has no tuples; fields whose default is a tuple
                # (render_dims) accept a list and convert.
                default = field_map[key].default
                if isinstance(default, tuple) and isinstance(value, list):
                    value = tuple(value)
                values[key] = value
            try:
                kwargs[section] = section_cls(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value in section {section!r}: {exc}") from exc
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for section in _SECTIONS:
            value = dataclasses.asdict(getattr(self, section))
            for key, item in value.items():
                if isinstance(item, tuple):
                    value[key] = list(item)
            out[section] = value
        return out


def load_config(path: str | Path | None) -> RunConfig:
    """Read a RunConfig from a JSON file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)
