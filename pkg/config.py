import os
import logging
import dataclasses
from typing import Any, Dict, Mapping, Optional, TypeVar

from dotenv import load_dotenv, dotenv_values

from errors import ConfigInvalid

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

TOOLKIT_VERSION = "1.0.0"

T = TypeVar("T")


def get_log_level(default: str = "INFO") -> str:
    """Log level from TENSEGRITY_LOG_LEVEL, falling back to default"""
    return os.getenv("TENSEGRITY_LOG_LEVEL", default).upper()


def get_checkpoint_path() -> Optional[str]:
    return os.getenv("TENSEGRITY_CHECKPOINT")


def get_out_dir(default: str = "out") -> str:
    return os.getenv("TENSEGRITY_OUT_DIR", default)


def load_override_file(path: str) -> Dict[str, str]:
    """Read a key=value file (dotenv syntax) into a plain dict"""
    if not os.path.exists(path):
        raise ConfigInvalid(f"config file not found: {path}")

    values = dotenv_values(path)
    overrides = {key.strip().lower().replace("-", "_"): value
                 for key, value in values.items() if value is not None}
    logger.info(f"Loaded {len(overrides)} override(s) from {path}")
    return overrides


def _coerce(name: str, raw: Any, target: Any) -> Any:
    if not isinstance(raw, str):
        return raw

    text = raw.strip()
    try:
        if target is bool or target == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if target is int or target == "int":
            return int(text)
        if target is float or target == "float":
            return float(text)
        if target in (Optional[int], "Optional[int]"):
            return None if text.lower() in ("", "none") else int(text)
    except ValueError:
        raise ConfigInvalid(f"bad value for {name}: {raw!r}")
    return text


def apply_overrides(config: T, overrides: Mapping[str, Any]) -> T:
    """Return a copy of a config dataclass with overrides coerced and applied"""
    fields = {f.name: f for f in dataclasses.fields(config)}
    changes = {}
    for key, raw in overrides.items():
        if raw is None:
            continue
        if key not in fields:
            raise ConfigInvalid(f"unknown {type(config).__name__} key: {key}")
        changes[key] = _coerce(key, raw, fields[key].type)

    updated = dataclasses.replace(config, **changes)
    validate = getattr(updated, "validate", None)
    if callable(validate):
        validate()
    return updated


def split_overrides(overrides: Mapping[str, Any], config_type: type) -> Dict[str, Any]:
    """Pick the keys of a flat override mapping that belong to one config dataclass"""
    names = {f.name for f in dataclasses.fields(config_type)}
    return {key: value for key, value in overrides.items() if key in names}


def config_to_dict(config: Any) -> Dict[str, Any]:
    return dataclasses.asdict(config)
