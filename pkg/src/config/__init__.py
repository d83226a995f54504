"""Configuration management"""

from .settings import Settings, derive_seed, get_settings, load_run_config

__all__ = ["Settings", "derive_seed", "get_settings", "load_run_config"]
