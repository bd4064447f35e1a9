from __future__ import annotations

from typing import Dict, Optional, Set

from .errors import ConfigError

# Built-in defaults; every config key has one. Presets override a subset,
# config files override presets, explicit CLI flags override everything.
DEFAULTS: Dict[str, object] = {
    "preset": None,
    "seed": 0,
    "seeds": (1, 2, 3),
    "image_size": (32, 32),
    "workers": 1,
    "expert_epochs": 30,
    "expert_batch_size": 8,
    "expert_learning_rate": 0.01,
    "expert_momentum": 0.9,
    "gating_epochs": 20,
    "gating_batch_size": 8,
    "gating_learning_rate": 0.05,
    "gating_momentum": 0.9,
    "finetune_epochs": 10,
    "finetune_learning_rate": 0.005,
    "focal_alpha": 0.25,
    "focal_gamma": 2.0,
    "pos_iou": 0.5,
    "neg_iou": 0.4,
    "max_grad_norm": 10.0,
    "anchor_scales": (8.0, 12.0),
    "anchor_ratios": (0.5, 1.0, 2.0),
    "backbone_channels": (8, 16),
    "head_channels": 16,
    "gating_channels": (8, 16, 16),
    "score_threshold": 0.05,
    "nms_iou": 0.5,
    "max_detections": 100,
    "eval_iou": 0.5,
    "top_k": 2,
    "model_counts": (1, 2, 3, 4, 5),
    "source_samples": 60,
    "eval_samples": 40,
    # 0 keeps each target's few-shot size from the preset layout
    "few_shot_samples": 0,
}

PRESETS: Dict[str, Dict[str, object]] = {
    "small5": {
        "top_k": 2,
        "model_counts": (1, 2, 3, 4, 5),
        "source_samples": 60,
        "eval_samples": 40,
    },
    "wide30": {
        "top_k": 5,
        "model_counts": (5, 10, 15, 20, 25, 30),
        "source_samples": 60,
        "eval_samples": 40,
        "expert_epochs": 20,
    },
    "identity5": {
        "top_k": 2,
        "model_counts": (1, 2, 3, 4, 5),
        "source_samples": 60,
        "eval_samples": 40,
    },
    "single1": {
        "top_k": 1,
        "model_counts": (1,),
        "source_samples": 60,
        "eval_samples": 40,
    },
}

# Alternate names accepted wherever a preset is named.
PRESET_ALIASES: Dict[str, str] = {"paper30": "wide30"}

PRESET_NAMES = tuple(sorted({*PRESETS, *PRESET_ALIASES}))

OPTION_KEYS = set(DEFAULTS) - {"preset"}

# CLI flag -> config key. Flags not listed here never override config values.
FLAG_KEYS: Dict[str, str] = {f"--{key.replace('_', '-')}": key for key in DEFAULTS}


def build_base_config() -> Dict[str, object]:
    return dict(DEFAULTS)


def resolve_preset(preset_name: str) -> str:
    """Canonical preset name for ``preset_name``; unknown names are a config error."""
    name = PRESET_ALIASES.get(preset_name, preset_name)
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset: {preset_name!r} (choose from {', '.join(PRESET_NAMES)})")
    return name


def merge_preset(
    preset_name: Optional[str],
    base: Dict[str, object],
    provided: Set[str],
) -> Dict[str, object]:
    """Merge preset values into a base config, respecting explicitly provided options.

    Rules:
    - If preset_name is None, return base unchanged.
    - An unknown preset name is a config error; aliases resolve to their preset.
    - Apply preset values only for keys not in `provided`.
    """
    if not preset_name:
        return base
    name = resolve_preset(preset_name)
    preset = PRESETS[name]

    effective = dict(base)
    effective["preset"] = name
    for k in OPTION_KEYS:
        if k in preset and k not in provided:
            effective[k] = preset[k]
    return effective


def detect_provided_options(argv_tokens: Optional[list[str]]) -> Set[str]:
    """Detect which CLI options were explicitly provided by scanning argv tokens.

    Handles forms like:
    - --seed 7
    - --seed=7
    - --image-size 32x32
    """
    provided: Set[str] = set()
    if not argv_tokens:
        return provided

    for t in argv_tokens:
        if not t.startswith("--"):
            continue
        name = t.split("=", 1)[0]
        key = FLAG_KEYS.get(name)
        if key is not None:
            provided.add(key)
    return provided
