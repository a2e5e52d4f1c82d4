"""Application configuration."""

import re
from functools import lru_cache
from pathlib import Path
from typing import Any

import yaml
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from mcf_fusion.core.errors import ConfigurationError

DEFAULT_PRESETS_PATH = Path(__file__).parent.parent.parent / "config" / "presets.yaml"

# `#` opens a comment only at line start or after whitespace.
_COMMENT = re.compile(r"(?:^|\s)#.*$")


class Settings(BaseSettings):
    """Process-wide settings, read from MCF_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="MCF_", env_file=".env", extra="ignore")

    # Logging
    LOG_LEVEL: str = Field(default="INFO")
    LOG_FORMAT: str = Field(default="console", description="console or json")
    LOG_CACHE: bool = Field(
        default=True, description="Bind loggers to the current stderr on first use"
    )

    # Presets
    PRESETS_PATH: Path = Field(default=DEFAULT_PRESETS_PATH)

    # Seeding
    DEFAULT_SEED: int = Field(default=0, ge=0)

    # Gradient checks
    GRADCHECK_MAX_ELEMENTS: int = Field(
        default=24,
        ge=1,
        description="Entries sampled per parameter tensor during gradient checks",
    )


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


# Used when config/presets.yaml is not shipped alongside the package.
_FALLBACK_PRESETS: dict[str, dict[str, Any]] = {
    "emotic-mha": {
        "variant": "mha_enc", "layers": 4, "heads": 8, "d_model": 512,
        "task": "multilabel_cont", "n_disc": 26, "optimizer": "adamw",
        "lr0": 2.0e-5, "gamma": 1.0, "batch_size": 32, "lambda1": 0.8, "lambda2": 0.2,
        "freeze": "adapter_pe",
    },
    "caer-sag": {
        "variant": "sag_mha_enc", "layers": 3, "heads": 8, "d_model": 768,
        "task": "single_label", "n_disc": 7, "optimizer": "adam",
        "lr0": 2.0e-4, "gamma": 0.9, "batch_size": 64,
    },
}


@lru_cache()
def get_presets() -> dict[str, dict[str, Any]]:
    """Load named run presets from YAML."""
    presets_path = get_settings().PRESETS_PATH

    if not presets_path.exists():
        return _FALLBACK_PRESETS

    with open(presets_path, "r") as f:
        loaded = yaml.safe_load(f) or {}

    if not isinstance(loaded, dict) or not all(isinstance(v, dict) for v in loaded.values()):
        raise ConfigurationError(
            "Presets file must map preset names to key/value tables",
            {"path": str(presets_path)},
        )
    return loaded


def get_preset(name: str) -> dict[str, Any]:
    """Return a copy of one preset's keys."""
    presets = get_presets()
    if name not in presets:
        raise ConfigurationError(
            f"Unknown preset: {name}",
            {"preset": name, "available": sorted(presets)},
        )
    return dict(presets[name])


def read_key_value_file(path: Path) -> dict[str, str]:
    """Parse a plain-text `key = value` file; `#` at line start or after whitespace starts a comment."""
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}", {"path": str(path)})

    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = _COMMENT.sub("", raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"{path}:{lineno}: expected 'key = value'",
                {"path": str(path), "line": lineno},
            )
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(
                f"{path}:{lineno}: empty key", {"path": str(path), "line": lineno}
            )
        if key in entries:
            raise ConfigurationError(
                f"{path}:{lineno}: duplicate key '{key}'",
                {"path": str(path), "line": lineno, "key": key},
            )
        entries[key] = value
    return entries


def format_key_value(entries: dict[str, Any]) -> str:
    """Render a mapping as `key = value` lines in insertion order."""
    lines = []
    for key, value in entries.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = ""
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
