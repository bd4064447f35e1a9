from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Iterable

import yaml

from .errors import ConfigError
from .presets import DEFAULTS, PRESET_NAMES, merge_preset, resolve_preset
from .utils import format_image_size, parse_image_size

CONFIG_KEYS = set(DEFAULTS)

INT_KEYS = {
    "seed",
    "workers",
    "expert_epochs",
    "expert_batch_size",
    "gating_epochs",
    "gating_batch_size",
    "finetune_epochs",
    "head_channels",
    "max_detections",
    "top_k",
    "source_samples",
    "eval_samples",
    "few_shot_samples",
}

FLOAT_KEYS = {
    "expert_learning_rate",
    "expert_momentum",
    "gating_learning_rate",
    "gating_momentum",
    "finetune_learning_rate",
    "focal_alpha",
    "focal_gamma",
    "pos_iou",
    "neg_iou",
    "max_grad_norm",
    "score_threshold",
    "nms_iou",
    "eval_iou",
}

INT_TUPLE_KEYS = {"seeds", "backbone_channels", "gating_channels", "model_counts"}
FLOAT_TUPLE_KEYS = {"anchor_scales", "anchor_ratios"}

# probabilities / overlaps
UNIT_INTERVAL_KEYS = {"focal_alpha", "pos_iou", "neg_iou", "score_threshold", "nms_iou", "eval_iou"}

CONFIG_PRINT_ORDER = [
    "preset",
    "seed",
    "seeds",
    "image_size",
    "workers",
    "source_samples",
    "eval_samples",
    "few_shot_samples",
    "backbone_channels",
    "head_channels",
    "gating_channels",
    "anchor_scales",
    "anchor_ratios",
    "expert_epochs",
    "expert_batch_size",
    "expert_learning_rate",
    "expert_momentum",
    "gating_epochs",
    "gating_batch_size",
    "gating_learning_rate",
    "gating_momentum",
    "finetune_epochs",
    "finetune_learning_rate",
    "focal_alpha",
    "focal_gamma",
    "pos_iou",
    "neg_iou",
    "max_grad_norm",
    "score_threshold",
    "nms_iou",
    "max_detections",
    "eval_iou",
    "top_k",
    "model_counts",
]


def build_config_defaults() -> Dict[str, Any]:
    return dict(DEFAULTS)


def load_yaml_config(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"Config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config root must be a mapping: {path}")
    return normalize_config(data)


def normalize_config(raw: Dict[str, Any]) -> Dict[str, Any]:
    normalized: Dict[str, Any] = {}

    for key, value in raw.items():
        if not isinstance(key, str):
            raise ConfigError("Config keys must be strings")
        norm_key = key.strip().lower().replace("-", "_")
        if norm_key not in CONFIG_KEYS:
            raise ConfigError(f"Unknown config key: {key}")
        normalized[norm_key] = coerce_value(norm_key, value)

    return normalized


def coerce_value(key: str, value: Any) -> Any:
    """Type-check one config value; raises ConfigError naming ``key``."""
    if key == "preset":
        if value is None:
            return None
        if not isinstance(value, str) or value not in PRESET_NAMES:
            raise ConfigError(f"preset must be one of: {', '.join(PRESET_NAMES)}")
        return resolve_preset(value)

    if key == "image_size":
        return _parse_size_value(value)

    if key in INT_KEYS:
        val = _parse_int_value(key, value)
        if val < 0 or (val == 0 and key not in {"seed", "few_shot_samples", "expert_epochs", "gating_epochs", "finetune_epochs"}):
            raise ConfigError(f"{key} must be > 0")
        return val

    if key in FLOAT_KEYS:
        val = _parse_float_value(key, value)
        if key in UNIT_INTERVAL_KEYS and not 0.0 <= val <= 1.0:
            raise ConfigError(f"{key} must be in [0, 1]")
        if val < 0:
            raise ConfigError(f"{key} must be >= 0")
        return val

    if key in INT_TUPLE_KEYS:
        vals = tuple(_parse_int_value(key, v) for v in _as_list(key, value))
        if not vals:
            raise ConfigError(f"{key} must not be empty")
        return vals

    if key in FLOAT_TUPLE_KEYS:
        vals = tuple(_parse_float_value(key, v) for v in _as_list(key, value))
        if not vals or any(v <= 0 for v in vals):
            raise ConfigError(f"{key} must be a non-empty list of positive numbers")
        return vals

    raise ConfigError(f"Unknown config key: {key}")


def build_effective_config(
    base: Dict[str, Any],
    preset_name: str | None,
    config_values: Dict[str, Any],
    cli_values: Dict[str, Any],
    cli_provided: Iterable[str],
) -> Dict[str, Any]:
    effective = merge_preset(preset_name, base, provided=set())

    for key, value in config_values.items():
        if key == "preset":
            continue
        if value is not None:
            effective[key] = value

    for key in cli_provided:
        if key in cli_values and key != "preset":
            effective[key] = cli_values[key]

    return effective


def format_effective_config(effective: Dict[str, Any]) -> Dict[str, Any]:
    output: Dict[str, Any] = {}
    for key in CONFIG_PRINT_ORDER:
        if key not in effective:
            continue
        value = effective[key]
        if isinstance(value, Path):
            output[key] = str(value)
        elif key == "image_size":
            output[key] = format_image_size(value)
        elif isinstance(value, tuple):
            output[key] = list(value)
        else:
            output[key] = value
    return output


def _as_list(name: str, value: Any) -> list:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    if isinstance(value, (list, tuple)):
        return list(value)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return [value]
    raise ConfigError(f"Config key {name} must be a list")


def _parse_size_value(value: Any) -> tuple[int, int]:
    if isinstance(value, str):
        try:
            return parse_image_size(value)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return _parse_int_value("image_size", value[0]), _parse_int_value("image_size", value[1])
    raise ConfigError("image_size must be HEIGHTxWIDTH string or [height, width]")


def _parse_float_value(name: str, value: Any) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"Config key {name} must be a number")
    try:
        return float(value)
    except Exception as exc:
        raise ConfigError(f"Config key {name} must be a number") from exc


def _parse_int_value(name: str, value: Any) -> int:
    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
        raise ConfigError(f"Config key {name} must be an integer")
    try:
        return int(value)
    except Exception as exc:
        raise ConfigError(f"Config key {name} must be an integer") from exc


# ---------------------------------------------------------------------------
# typed views


def expert_train_config(effective: Dict[str, Any], seed: int):
    from .detector import TrainConfig

    return TrainConfig(
        epochs=int(effective["expert_epochs"]),
        batch_size=int(effective["expert_batch_size"]),
        learning_rate=float(effective["expert_learning_rate"]),
        momentum=float(effective["expert_momentum"]),
        focal_alpha=float(effective["focal_alpha"]),
        focal_gamma=float(effective["focal_gamma"]),
        pos_iou=float(effective["pos_iou"]),
        neg_iou=float(effective["neg_iou"]),
        max_grad_norm=float(effective["max_grad_norm"]) or None,
        seed=int(seed),
    )


def gating_train_config(effective: Dict[str, Any], seed: int):
    from .detector import TrainConfig

    return TrainConfig(
        epochs=int(effective["gating_epochs"]),
        batch_size=int(effective["gating_batch_size"]),
        learning_rate=float(effective["gating_learning_rate"]),
        momentum=float(effective["gating_momentum"]),
        focal_alpha=float(effective["focal_alpha"]),
        focal_gamma=float(effective["focal_gamma"]),
        pos_iou=float(effective["pos_iou"]),
        neg_iou=float(effective["neg_iou"]),
        max_grad_norm=float(effective["max_grad_norm"]) or None,
        seed=int(seed),
    )


def finetune_train_config(effective: Dict[str, Any], seed: int):
    from .detector import TrainConfig

    return TrainConfig(
        epochs=int(effective["finetune_epochs"]),
        batch_size=int(effective["expert_batch_size"]),
        learning_rate=float(effective["finetune_learning_rate"]),
        momentum=float(effective["expert_momentum"]),
        focal_alpha=float(effective["focal_alpha"]),
        focal_gamma=float(effective["focal_gamma"]),
        pos_iou=float(effective["pos_iou"]),
        neg_iou=float(effective["neg_iou"]),
        max_grad_norm=float(effective["max_grad_norm"]) or None,
        seed=int(seed),
    )


def detector_arch(effective: Dict[str, Any]):
    from .detector import DetectorConfig

    return DetectorConfig(
        image_size=tuple(effective["image_size"]),
        backbone_channels=tuple(effective["backbone_channels"]),
        head_channels=int(effective["head_channels"]),
        anchor_scales=tuple(effective["anchor_scales"]),
        anchor_ratios=tuple(effective["anchor_ratios"]),
    )


def gating_arch(effective: Dict[str, Any]):
    from .gating import GatingArch

    return GatingArch(image_size=tuple(effective["image_size"]), channels=tuple(effective["gating_channels"]))


def inference_config(effective: Dict[str, Any]):
    from .evaluation import InferenceConfig

    return InferenceConfig(
        score_threshold=float(effective["score_threshold"]),
        nms_iou=float(effective["nms_iou"]),
        max_detections=int(effective["max_detections"]),
    )
