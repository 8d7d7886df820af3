# msdpn/config_utils.py
import json
import os
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from . import ConfigError

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "config.resolved.json"

DATA_DEFAULTS: Dict[str, Any] = {
    "dataset": None,
    "scenes": 8,
    "seed": 0,
    "height": 64,
    "width": 64,
    "beams": 360,
    "fov_deg": 180.0,
    "r_max": 20.0,
    "noise_std": 0.0,
    "min_boxes": 2,
    "max_boxes": 6,
}

MODEL_DEFAULTS: Dict[str, Any] = {
    "stages": 2,
    "width_mult": 0.25,
    "csfa_mode": "full",
    "input_mode": "ref-d",
    "height": None,
    "width": None,
    "seed": 0,
}

TRAIN_DEFAULTS: Dict[str, Any] = {
    "lr": 1e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps_adam": 1e-8,
    "weight_decay": 1e-4,
    "lr_decay_per_epoch": 0.98,
    "epochs": 30,
    "batch_size": 8,
    "seed": 0,
    "input_mode": None,
    "checkpoint_every": 0,
    "stage_losses": False,
}

EVAL_DEFAULTS: Dict[str, Any] = {
    "dataset": None,
    "write_png": True,
}

# Expected type per key; None-able keys accept null as well.
_TYPES = {
    "dataset": str, "scenes": int, "seed": int, "height": int, "width": int, "beams": int,
    "fov_deg": float, "r_max": float, "noise_std": float, "min_boxes": int, "max_boxes": int,
    "stages": int, "width_mult": float, "csfa_mode": str, "input_mode": str,
    "lr": float, "beta1": float, "beta2": float, "eps_adam": float, "weight_decay": float,
    "lr_decay_per_epoch": float, "epochs": int, "batch_size": int, "checkpoint_every": int,
    "stage_losses": bool, "write_png": bool,
}
_NULLABLE = {"dataset", "height", "width", "input_mode"}


def load_configuration(config_file_path: Union[str, Path],
                       logger_instance: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """
    Loads a run configuration from a JSON file. The content is not validated
    here; the get_*_settings accessors below do that per section.

    Args:
        config_file_path (str | Path): The full path to the configuration JSON file.
        logger_instance (logging.Logger, optional): Logger to report to. Defaults to
                                                    this module's logger.

    Returns:
        Dict[str, Any]: The raw configuration dictionary.

    Raises:
        FileNotFoundError: If the configuration file does not exist.
        json.JSONDecodeError: If the configuration file is not valid JSON.
    """
    log = logger_instance if logger_instance is not None else logger
    if not os.path.exists(config_file_path):
        log.error(f"Configuration file not found at: {config_file_path}")
        raise FileNotFoundError(f"Configuration file not found: {config_file_path}")

    try:
        with open(config_file_path, 'r', encoding='utf-8') as f:
            config = json.load(f)
        log.info(f"Configuration loaded successfully from: {config_file_path}")
    except json.JSONDecodeError as e:
        log.error(f"Error decoding JSON from {config_file_path}: {e}")
        raise
    if not isinstance(config, dict):
        raise ConfigError(f"Configuration root in {config_file_path} must be a JSON object.")
    return config


def _coerce(section: str, key: str, value: Any) -> Any:
    expected = _TYPES[key]
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"'{section}.{key}' must not be null.")
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{section}.{key}' must be true or false, got {value!r}.")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"'{section}.{key}' must be an integer, got {value!r}.")
        return int(value)
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{section}.{key}' must be a number, got {value!r}.")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"'{section}.{key}' must be a string, got {value!r}.")
    return value


def _section_settings(config: Dict[str, Any], section: str, defaults: Dict[str, Any]) -> Dict[str, Any]:
    """Copies `section` over its defaults, rejecting unknown keys and coercing types."""
    raw = config.get(section, {})
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"Configuration section '{section}' must be a JSON object.")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{section}': {', '.join(unknown)}.")
    settings = dict(defaults)
    for key, value in raw.items():
        settings[key] = _coerce(section, key, value)
    return settings


def get_data_settings(config: Dict[str, Any]) -> Dict[str, Any]:
    """
    Extracts and validates the 'data' section (synthetic dataset or an existing one).

    Raises:
        ConfigError: On unknown keys or invalid values.
    """
    settings = _section_settings(config, "data", DATA_DEFAULTS)
    if settings["scenes"] < 0:
        raise ConfigError(f"'data.scenes' must be >= 0, got {settings['scenes']}.")
    if settings["beams"] < 1:
        raise ConfigError(f"'data.beams' must be >= 1, got {settings['beams']}.")
    if not 0 < settings["fov_deg"] <= 360:
        raise ConfigError(f"'data.fov_deg' must lie in (0, 360], got {settings['fov_deg']}.")
    if settings["r_max"] <= 0 or settings["noise_std"] < 0:
        raise ConfigError("'data.r_max' must be > 0 and 'data.noise_std' >= 0.")
    if not 0 <= settings["min_boxes"] <= settings["max_boxes"]:
        raise ConfigError("'data.min_boxes' must satisfy 0 <= min_boxes <= max_boxes.")
    if settings["height"] <= 0 or settings["width"] <= 0:
        raise ConfigError("'data.height' and 'data.width' must be positive.")
    return settings


def get_model_settings(config: Dict[str, Any]) -> Dict[str, Any]:
    """
    Extracts the 'model' section; image size defaults to the data section's.

    Raises:
        ConfigError: On unknown keys or values NetworkConfig rejects.
    """
    from .nn import NetworkConfig

    settings = _section_settings(config, "model", MODEL_DEFAULTS)
    data = get_data_settings(config)
    if settings["height"] is None:
        settings["height"] = data["height"]
    if settings["width"] is None:
        settings["width"] = data["width"]
    network_fields = {k: v for k, v in settings.items() if k != "seed"}
    NetworkConfig(**network_fields)
    return settings


def get_train_settings(config: Dict[str, Any]) -> Dict[str, Any]:
    """
    Extracts the 'train' section; `input_mode` follows the model unless set,
    in which case it must agree with it.

    Raises:
        ConfigError: On unknown keys, invalid values or a mode mismatch.
    """
    from .train import TrainConfig

    settings = _section_settings(config, "train", TRAIN_DEFAULTS)
    model_mode = get_model_settings(config)["input_mode"]
    if settings["input_mode"] is None:
        settings["input_mode"] = model_mode
    elif settings["input_mode"] != model_mode:
        raise ConfigError(f"'train.input_mode' ({settings['input_mode']}) differs from "
                          f"'model.input_mode' ({model_mode}).")
    TrainConfig(**settings)
    return settings


def get_eval_settings(config: Dict[str, Any]) -> Dict[str, Any]:
    return _section_settings(config, "eval", EVAL_DEFAULTS)


def resolve_run_config(config: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    """
    Resolves all four sections; everything is validated before any work starts.

    Raises:
        ConfigError: On unknown sections or any invalid section.
    """
    unknown = sorted(set(config) - {"data", "model", "train", "eval"})
    if unknown:
        raise ConfigError(f"Unknown configuration section(s): {', '.join(unknown)}.")
    return {
        "data": get_data_settings(config),
        "model": get_model_settings(config),
        "train": get_train_settings(config),
        "eval": get_eval_settings(config),
    }


def write_resolved_config(config: Dict[str, Any], output_directory: Union[str, Path],
                          logger_instance: Optional[logging.Logger] = None) -> Path:
    """Echoes the resolved configuration to <outdir>/config.resolved.json."""
    log = logger_instance if logger_instance is not None else logger
    path = Path(output_directory) / RESOLVED_CONFIG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info(f"Resolved configuration written to {path}")
    return path
