from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backend import DEFAULT_DEADLINE_MS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScoringConfig:
    model: str = "gpt-4.1-mini"
    base_url: str | None = None
    deadline_ms: int = DEFAULT_DEADLINE_MS
    adaptive_timeout: bool = False
    field_threshold: float = 0.5
    alpha: float = 0.1
    beta: float = 0.9
    temperature: float = 0.0
    # templates whose field scores also yield a harmonic-mean doc score
    harmonic_templates: tuple[str, ...] = ("T2_numeric", "T3_likert")
    max_tokens: int | None = None
    request_timeout_s: float = 120.0
    template_dir: str | None = None
    mock_script: str | None = None
    concurrency: int = 4

    def __post_init__(self) -> None:
        if self.deadline_ms <= 0:
            raise ConfigError("deadline_ms must be positive")
        if not 0.0 <= self.alpha <= self.beta <= 1.0:
            raise ConfigError("need 0 <= alpha <= beta <= 1")
        if not 0.0 <= self.field_threshold <= 1.0:
            raise ConfigError("field_threshold must lie in [0, 1]")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        object.__setattr__(self, "harmonic_templates", tuple(self.harmonic_templates))

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> ScoringConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))

    def with_overrides(self, **overrides: Any) -> ScoringConfig:
        """Apply overrides, skipping ``None`` values (unset CLI flags)."""
        given = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **given)


def load_config(path: str | Path | None) -> ScoringConfig:
    """Read a JSON or TOML config file; ``None`` gives the defaults."""
    if path is None:
        return ScoringConfig()
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".toml":
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a key-value table")
    try:
        return ScoringConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
