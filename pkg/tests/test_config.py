from __future__ import annotations

from pathlib import Path

import pytest

from gated_fusion.config import (
    build_config_defaults,
    build_effective_config,
    detector_arch,
    expert_train_config,
    format_effective_config,
    inference_config,
    load_yaml_config,
    normalize_config,
)
from gated_fusion.errors import ConfigError


def test_load_yaml_config_coerces_values(tmp_path: Path) -> None:
    cfg = tmp_path / "settings.yml"
    cfg.write_text(
        "preset: identity5\nimage-size: 16x24\nseeds: [4, 5]\nanchor_scales: 6, 9\nfocal_gamma: 1\n",
        encoding="utf-8",
    )

    data = load_yaml_config(cfg)

    assert data["preset"] == "identity5"
    assert data["image_size"] == (16, 24)
    assert data["seeds"] == (4, 5)
    assert data["anchor_scales"] == (6.0, 9.0)
    assert data["focal_gamma"] == 1.0


def test_load_yaml_config_empty_file(tmp_path: Path) -> None:
    cfg = tmp_path / "settings.yml"
    cfg.write_text("", encoding="utf-8")
    assert load_yaml_config(cfg) == {}


def test_load_yaml_config_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_yaml_config(tmp_path / "nope.yml")


@pytest.mark.parametrize(
    "raw",
    [
        {"resolution": "1920x1080"},
        {"preset": "youtube"},
        {"seed": True},
        {"expert_epochs": 1.5},
        {"expert_batch_size": 0},
        {"pos_iou": 1.5},
        {"anchor_ratios": [1.0, -2.0]},
        {"seeds": []},
        {"image_size": "32"},
    ],
)
def test_normalize_config_rejects_bad_values(raw) -> None:
    with pytest.raises(ConfigError):
        normalize_config(raw)


def test_load_yaml_config_rejects_non_mapping(tmp_path: Path) -> None:
    cfg = tmp_path / "settings.yml"
    cfg.write_text("- a\n- b\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_yaml_config(cfg)


def test_config_precedence() -> None:
    base = build_config_defaults()
    config_values = {
        "preset": "single1",
        "expert_epochs": 5,
        "gating_epochs": 7,
        "top_k": 3,
    }
    cli_values = {
        "preset": "wide30",
        "expert_epochs": 2,
        "top_k": 1,
    }
    provided = {"preset", "expert_epochs"}

    effective = build_effective_config(base, "wide30", config_values, cli_values, provided)

    assert effective["preset"] == "wide30"
    assert effective["expert_epochs"] == 2
    assert effective["gating_epochs"] == 7
    assert effective["top_k"] == 3
    assert effective["model_counts"] == (5, 10, 15, 20, 25, 30)


def test_format_effective_config() -> None:
    effective = build_config_defaults()
    printable = format_effective_config(effective)
    assert printable["image_size"] == "32x32"
    assert printable["seeds"] == [1, 2, 3]
    assert list(printable)[0] == "preset"


def test_typed_views_follow_effective_config() -> None:
    effective = build_config_defaults()
    effective.update({"expert_epochs": 3, "max_grad_norm": 0.0, "score_threshold": 0.2})

    train = expert_train_config(effective, seed=9)
    assert train.epochs == 3
    assert train.seed == 9
    assert train.max_grad_norm is None

    arch = detector_arch(effective)
    assert arch.image_size == (32, 32)
    assert arch.anchor_scales == (8.0, 12.0)

    assert inference_config(effective).score_threshold == 0.2


def test_sample_settings_file_names_every_key() -> None:
    sample = Path(__file__).resolve().parents[1] / "settings.sample.yml"
    data = load_yaml_config(sample)
    assert set(data) == set(build_config_defaults())
    for key, value in data.items():
        if key != "preset":
            assert value == build_config_defaults()[key], key
