"""
Configuration Management
Process settings from environment variables, run configs from YAML files.
"""

from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings

from envshift.error_handler import ConfigError
from envshift.models.run_config import RunConfig


class Settings(BaseSettings):
    """Process settings loaded from ENVSHIFT_* environment variables"""

    log_level: str = Field(default="INFO", alias="ENVSHIFT_LOG_LEVEL")
    float_digits: int = Field(default=17, alias="ENVSHIFT_FLOAT_DIGITS")
    torch_threads: int = Field(default=0, alias="ENVSHIFT_TORCH_THREADS")
    default_config_name: str = "run_config.yaml"

    @property
    def float_format(self) -> str:
        """printf-style float format used for every CSV artifact"""
        return f"%.{self.float_digits}g"

    class Config:
        env_file = ".env"
        case_sensitive = False


# Global settings instance
settings = Settings()  # type: ignore[call-arg]


def parse_run_config(data: Optional[dict[str, Any]], seed: Optional[int] = None) -> RunConfig:
    """Validate a raw config mapping, optionally overriding the seed"""
    data = dict(data or {})
    if seed is not None:
        data["seed"] = seed
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(
            "Invalid run configuration",
            context={"errors": [f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors()]},
        ) from e


def load_run_config(path: str | Path, seed: Optional[int] = None) -> RunConfig:
    """
    Load and validate a YAML run config.

    Raises:
        ConfigError: missing/unreadable file, malformed YAML, or invalid values
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}", context={"path": str(path)})

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Could not read config {path}: {e}") from e

    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"Config {path} must be a mapping of sections")

    return parse_run_config(data, seed=seed)


def dump_run_config(config: RunConfig, path: str | Path) -> None:
    """Echo the effective config (provenance for every output directory)"""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        yaml.safe_dump(config.model_dump(), f, sort_keys=False)
