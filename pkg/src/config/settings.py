"""
Application Settings
===================

Centralized configuration management using Pydantic Settings, plus the loader
that turns a TOML run file and command-line overrides into a RunConfig.
"""

import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from ..exceptions import IoError
from ..models.config_models import RunConfig

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


class Settings(BaseSettings):
    """Process-level settings loaded from FREEGEN_* environment variables."""

    workdir: Path = Field(default=Path("workdir"), description="Root of all run artifacts")
    log_level: str = "INFO"
    seed: int = 0
    device: str = Field(default="cpu", description="torch device; only cpu is supported")
    num_threads: Optional[int] = Field(default=None, description="torch intra-op threads")
    deterministic: bool = True

    model_config = SettingsConfigDict(
        env_prefix="FREEGEN_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance.

    Use this function to access settings throughout the application.
    """
    return Settings()


def _parse_override_value(raw: str) -> Any:
    """Parse a flag value with TOML rules, falling back to a bare string."""
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def _set_dotted(target: Dict[str, Any], dotted_key: str, value: Any) -> None:
    parts = dotted_key.split(".")
    node = target
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"Override '{dotted_key}' descends into a non-table key '{part}'")
    node[parts[-1]] = value


def load_run_config(
    config_file: Optional[Path] = None,
    overrides: Iterable[str] = (),
    base: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Build a RunConfig from an optional TOML file and key=value overrides.

    Args:
        config_file: TOML file with top-level keys and [tile]/[recon]/... tables
        overrides: Strings like "cotrain.rounds=2" or "width=128"
        base: Values applied before the file (e.g. flags with dedicated options)

    Returns:
        Validated RunConfig
    """
    data: Dict[str, Any] = {}
    for key, value in (base or {}).items():
        _set_dotted(data, key, value)

    if config_file is not None:
        try:
            with open(config_file, "rb") as fh:
                file_data = tomllib.load(fh)
        except OSError as e:
            raise IoError(f"Cannot read config file {config_file}: {e}") from e
        for key, value in file_data.items():
            if isinstance(value, dict):
                data.setdefault(key, {}).update(value)
            else:
                data[key] = value
        logger.info(f"Loaded run config from {config_file}")

    for item in overrides:
        if "=" not in item:
            raise ValueError(f"Override must look like key=value, got '{item}'")
        key, raw = item.split("=", 1)
        _set_dotted(data, key.strip(), _parse_override_value(raw.strip()))

    return RunConfig.model_validate(data)


def splitmix64(state: int) -> int:
    """One splitmix64 output for the given 64-bit state."""
    z = (state + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, stage: str) -> int:
    """Per-stage seed: splitmix64 over the global seed folded with the stage name."""
    state = seed & MASK64
    for byte in stage.encode("utf-8"):
        state = splitmix64(state ^ byte)
    return state & 0x7FFFFFFF
