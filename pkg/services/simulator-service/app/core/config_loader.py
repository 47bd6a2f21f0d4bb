"""Experiment configuration loader.

Experiment files are YAML mappings whose keys are ExperimentConfig fields.
Relative profile and trace paths resolve against the config file's directory,
so checked-in configs work from any working directory.

Usage:
    from app.core.config_loader import load_experiment_config

    config = load_experiment_config("data/experiments/cascade1_diffserve.yaml", {"seed": 3})
"""

import logging
from pathlib import Path
from typing import Any

import yaml
from pydantic import ValidationError

from ..models import ConfigError, ExperimentConfig

logger = logging.getLogger(__name__)

# Fields holding input files that resolve relative to the config file
PATH_FIELDS = ("profiles_path", "trace_path")


def _field_name(error: ValidationError) -> str | None:
    errors = error.errors()
    if not errors:
        return None
    return ".".join(str(part) for part in errors[0]["loc"]) or None


def _set_dotted(target: dict[str, Any], dotted_key: str, value: Any) -> None:
    """Set target["a"]["b"] for key "a.b", creating nested mappings."""
    parts = dotted_key.split(".")
    node = target
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def parse_value(text: str) -> Any:
    """Interpret a CLI value the way YAML would ("1.05" -> 1.05, "true" -> True)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def build_config(raw: dict[str, Any], overrides: dict[str, Any] | None = None, check_files: bool = True) -> ExperimentConfig:
    """
    Validate a raw mapping (plus dotted-key overrides) into an ExperimentConfig.

    Raises:
        ConfigError: Invalid value, unknown key or missing referenced file
    """
    data = dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, key, value)

    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        field = _field_name(e)
        first = e.errors()[0]["msg"] if e.errors() else str(e)
        raise ConfigError(f"Invalid experiment config: {first}", field=field) from e

    if check_files:
        config.check_paths()
    return config


def load_experiment_config(
    path: Path | str,
    overrides: dict[str, Any] | None = None,
    check_files: bool = True,
) -> ExperimentConfig:
    """
    Load an experiment YAML file.

    Args:
        path: Config file path
        overrides: Dotted-key values that replace file values (CLI flags)
        check_files: Verify that referenced profile/trace files exist

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: Missing or unparseable file, or invalid content
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Experiment config not found: {path}", field="config")

    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse {path}: {e}", field="config") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping of config fields", field="config")

    base_dir = path.resolve().parent
    for key in PATH_FIELDS:
        value = raw.get(key)
        if value is not None and not Path(value).is_absolute():
            raw[key] = str(base_dir / value)
    raw.setdefault("name", path.stem)

    config = build_config(raw, overrides, check_files=check_files)
    logger.info(f"Loaded experiment config {path.name}: policy={config.policy.value} cascade={config.cascade}")
    return config


def with_overrides(config: ExperimentConfig, overrides: dict[str, Any], check_files: bool = True) -> ExperimentConfig:
    """Copy of config with dotted-key overrides applied and re-validated."""
    return build_config(config.model_dump(mode="json"), overrides, check_files=check_files)
