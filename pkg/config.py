"""
Configuration sources other than CLI flags.

- `.env` in the working directory is loaded once at import (environment settings).
- key=value files (adapter column map, classifier thresholds, watchdog rules) are
  parsed with python-dotenv and validated into typed models.
"""

import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import ConfigurationError
from models import ClassifierThresholds, WatchdogRuleSet

load_dotenv()

logger = logging.getLogger(__name__)

# Canonical adapter fields; every one must be mapped to a source column.
TRACK_FIELDS = ("frame", "id", "x", "y", "xVelocity", "yVelocity", "laneId")
# Optional adapter settings that may share the column map file.
ADAPTER_OPTIONS = ("y_down", "lane_width", "stride")


class Settings(BaseModel):
    log_level: str = "INFO"
    # Scenarios per worker task when evaluation fans out across threads.
    eval_chunk: int = Field(default=256, ge=1)


@lru_cache
def get_settings() -> Settings:
    """Environment settings, read once per process."""
    try:
        return Settings(
            log_level=os.environ.get("DVAE_LOG_LEVEL", "INFO").upper(),
            eval_chunk=int(os.environ.get("DVAE_EVAL_CHUNK", "256")),
        )
    except (ValueError, ValidationError) as e:
        raise ConfigurationError(f"invalid DVAE_* environment setting: {e}") from e


def read_key_value_file(path: str | Path) -> dict[str, str]:
    """Parse a key=value file (comments with #, optional quoting) into a plain dict."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    values = dotenv_values(path)
    out: dict[str, str] = {}
    for key, val in values.items():
        if val is None or not str(val).strip():
            raise ConfigurationError(f"{path}: key {key!r} has no value")
        out[key.strip()] = str(val).strip()
    return out


def _typed(path: Path, model: type[BaseModel], raw: dict[str, str]):
    unknown = set(raw) - set(model.model_fields)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return model(**raw)
    except ValidationError as e:
        raise ConfigurationError(f"{path}: {e}") from e


def load_thresholds(path: str | Path) -> ClassifierThresholds:
    return _typed(Path(path), ClassifierThresholds, read_key_value_file(path))


def load_rules(path: str | Path) -> WatchdogRuleSet:
    rules = _typed(Path(path), WatchdogRuleSet, read_key_value_file(path))
    logger.debug("Loaded watchdog rules from %s: %s", path, rules)
    return rules


def load_column_map(path: str | Path) -> tuple[dict[str, str], dict[str, str]]:
    """
    Split a column map file into (field -> source column, adapter options).
    Missing field mappings are a configuration error.
    """
    raw = read_key_value_file(path)
    unknown = set(raw) - set(TRACK_FIELDS) - set(ADAPTER_OPTIONS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    missing = [f for f in TRACK_FIELDS if f not in raw]
    if missing:
        raise ConfigurationError(f"{path}: column map lacks {missing}")
    columns = {f: raw[f] for f in TRACK_FIELDS}
    options = {k: raw[k] for k in ADAPTER_OPTIONS if k in raw}
    return columns, options


class AdapterOptions(BaseModel):
    """Typed adapter settings from a column map file; pydantic coerces the raw strings."""

    model_config = ConfigDict(frozen=True)

    y_down: bool = True
    lane_width: float = Field(default=3.75, gt=0)
    # None keeps the window-length stride.
    stride: Optional[int] = Field(default=None, ge=1)


def adapter_options(options: dict[str, str]) -> AdapterOptions:
    try:
        return AdapterOptions(**options)
    except ValidationError as e:
        raise ConfigurationError(f"invalid adapter option: {e}") from e
