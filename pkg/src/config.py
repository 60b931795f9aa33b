"""Configuration management for photonstat."""

import os
from typing import Any, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from .errors import ArgumentError

# Load environment variables from .env file
load_dotenv()

ENV_PREFIX = "PHOTONSTAT_"


class PhotonstatConfig(BaseModel):
    """Runtime settings shared by the CLI and the MCP server."""
    model_config = {'extra': 'forbid', 'validate_assignment': True}

    threads: int = 1
    chunk_slots: int = 1 << 20
    output_format: Literal["csv", "svg"] = "csv"
    debug: bool = False

    @model_validator(mode="before")
    @classmethod
    def read_environment(cls, data: Any) -> Any:
        """Fill unset fields from PHOTONSTAT_* variables (and DEBUG)."""
        if not isinstance(data, dict):
            return data
        values = dict(data)
        env_map = {
            "threads": f"{ENV_PREFIX}THREADS",
            "chunk_slots": f"{ENV_PREFIX}CHUNK_SLOTS",
            "output_format": f"{ENV_PREFIX}FORMAT",
            "debug": "DEBUG",
        }
        for field, env_name in env_map.items():
            raw = os.environ.get(env_name)
            if field not in values and raw not in (None, ""):
                values[field] = raw.strip()
        return values

    @field_validator("threads")
    @classmethod
    def validate_threads(cls, v: int) -> int:
        if v < 1:
            raise ValueError("threads must be >= 1 (PHOTONSTAT_THREADS)")
        return v

    @field_validator("chunk_slots")
    @classmethod
    def validate_chunk_slots(cls, v: int) -> int:
        if v < 64 or v % 64:
            raise ValueError("chunk_slots must be a positive multiple of 64 (PHOTONSTAT_CHUNK_SLOTS)")
        return v


def get_config() -> PhotonstatConfig:
    """Get validated configuration."""
    return PhotonstatConfig()


def _load_config() -> Tuple[PhotonstatConfig, Optional[str]]:
    """Validated settings, or defaults plus the validation message."""
    try:
        return get_config(), None
    except ValidationError as e:
        details = [f"'{'.'.join(str(x) for x in err['loc']) or 'environment'}': {err['msg']}" for err in e.errors()]
        return PhotonstatConfig.model_construct(), "invalid environment: " + "; ".join(details)


# Global config instance; entry points call ensure_valid_config() before work
config, config_error = _load_config()


def ensure_valid_config() -> PhotonstatConfig:
    """Raise ArgumentError when the environment failed validation at import."""
    if config_error is not None:
        raise ArgumentError(config_error)
    return config
