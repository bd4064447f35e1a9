"""Tests for `gated_fusion.detector` and the model container format."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_arch, tiny_samples
from gated_fusion.container import EXPERT_MAGIC, GATING_MAGIC, decode_container, encode_container, read_container
from gated_fusion.detector import (
    DetectorConfig,
    TrainConfig,
    check_compatible,
    detection_loss,
    expert_forward,
    fine_tune,
    focal_loss,
    init_expert,
    load_expert,
    match_dataset,
    save_expert,
    smooth_l1_loss,
    train_expert,
)
from gated_fusion.domains import DomainSpec, generate_domain_dataset
from gated_fusion.errors import ChecksumError, ConfigError, DimensionError, IncompatibleVersionError, ValidationError
from gated_fusion.evaluation import InferenceConfig, evaluate
from gated_fusion.gating import uniform_ensemble
from gated_fusion.geometry import generate_anchors
from gated_fusion.tensor import Tensor


def test_focal_loss_gradient(rng, gradcheck) -> None:
    probs = Tensor(rng.uniform(0.2, 0.8, size=(12, 2)))
    targets = (rng.random((12, 2)) < 0.3).astype(np.float64)
    valid = np.ones(12, dtype=bool)
    valid[[2, 7]] = False
    err = gradcheck(lambda: focal_loss(probs, targets, alpha=0.25, gamma=2.0, valid=valid), [probs], step=1e-3)
    assert err < 1e-3


def test_focal_loss_with_zero_gamma_is_weighted_cross_entropy() -> None:
    p = np.array([[0.9], [0.2], [0.6]])
    t = np.array([[1.0], [0.0], [1.0]])
    expected = -(0.25 * math.log(0.9) + 0.75 * math.log(0.8) + 0.25 * math.log(0.6)) / 2.0
    assert focal_loss(Tensor(p), t, alpha=0.25, gamma=0.0).item() == pytest.approx(expected, rel=1e-5)


def test_focal_loss_down_weights_easy_examples() -> None:
    easy = focal_loss(Tensor([[0.95]]), np.array([[1.0]]), gamma=2.0).item()
    hard = focal_loss(Tensor([[0.3]]), np.array([[1.0]]), gamma=2.0).item()
    assert easy == pytest.approx(0.25 * 0.05**2 * -math.log(0.95), rel=1e-4)
    assert hard / easy > 1000


def test_focal_loss_rejects_bad_inputs() -> None:
    with pytest.raises(ConfigError):
        focal_loss(Tensor([[0.5]]), np.array([[1.0]]), gamma=-1.0)
    with pytest.raises(DimensionError):
        focal_loss(Tensor([[0.5, 0.5]]), np.array([[1.0]]))


def test_smooth_l1_values() -> None:
    pred = Tensor([[0.5, -2.0, 0.0, 0.0]])
    # 0.125 + 1.5 over one masked row
    assert smooth_l1_loss(pred, np.zeros((1, 4))).item() == pytest.approx(1.625)


def test_smooth_l1_gradient_and_mask(rng, gradcheck) -> None:
    diffs = rng.choice([0.3, 0.6, 1.5, 2.5], size=(6, 4)) * rng.choice([-1.0, 1.0], size=(6, 4))
    target = rng.normal(size=(6, 4))
    pred = Tensor(target + diffs)
    mask = np.array([True, False, True, True, False, True])
    assert gradcheck(lambda: smooth_l1_loss(pred, target, mask=mask), [pred]) < 1e-3
    # masked rows receive no gradient
    assert np.all(pred.grad[~mask] == 0)


def _toy_match():
    arch = tiny_arch()
    samples = tiny_samples(n=2)
    anchors = generate_anchors(arch.anchor_config)
    return anchors, match_dataset(anchors, samples, 1, pos_iou=0.5, neg_iou=0.4)


def test_detection_loss_combines_terms(rng) -> None:
    anchors, matches = _toy_match()
    cls = Tensor(rng.uniform(0.05, 0.95, size=(2, len(anchors), 1)))
    reg = Tensor(rng.normal(size=(2, len(anchors), 4)))
    l_reg, l_cls, total = detection_loss(cls, reg, matches).values()
    assert total == pytest.approx(l_reg + l_cls, rel=1e-6)

    positives = sum(m.num_positives for m in matches)
    assert positives > 0
    targets = np.concatenate([m.cls_targets for m in matches])
    valid = np.concatenate([m.valid_mask for m in matches])
    alone = focal_loss(Tensor(cls.data.reshape(-1, 1)), targets, valid=valid, normalizer=positives)
    assert l_cls == pytest.approx(alone.item(), rel=1e-6)


def test_detection_loss_gradient(rng, gradcheck) -> None:
    anchors, matches = _toy_match()
    reg_targets = np.stack([m.reg_targets for m in matches])
    # offsets stay clear of the smooth-L1 knee at |x| = 1
    away = rng.choice([0.3, 1.5], size=reg_targets.shape) * rng.choice([-1.0, 1.0], size=reg_targets.shape)
    cls = Tensor(rng.uniform(0.3, 0.7, size=(2, len(anchors), 1)))
    reg = Tensor(reg_targets + away)
    assert gradcheck(lambda: detection_loss(cls, reg, matches).total, [cls, reg]) < 1e-3


def test_losses_are_zero_dimensional(rng) -> None:
    anchors, matches = _toy_match()
    cls = Tensor(rng.uniform(0.05, 0.95, size=(2, len(anchors), 1)))
    reg = Tensor(rng.normal(size=(2, len(anchors), 4)))
    losses = detection_loss(cls, reg, matches)
    assert losses.total.shape == ()
    assert losses.l_cls.shape == ()
    assert losses.l_reg.shape == ()


def test_detection_loss_rejects_anchor_mismatch(rng) -> None:
    _anchors, matches = _toy_match()
    cls = Tensor(rng.uniform(size=(2, 5, 1)))
    reg = Tensor(rng.normal(size=(2, 5, 4)))
    with pytest.raises(DimensionError):
        detection_loss(cls, reg, matches)


def test_config_validation() -> None:
    with pytest.raises(ConfigError):
        TrainConfig(pos_iou=0.3, neg_iou=0.4)
    with pytest.raises(ConfigError):
        TrainConfig(focal_alpha=1.0)
    with pytest.raises(ConfigError):
        DetectorConfig(image_size=(18, 16), backbone_channels=(4, 8))


def test_expert_forward_shapes() -> None:
    model = init_expert(tiny_arch(), seed=1, expert_id="S1")
    images = np.stack([s.image for s in tiny_samples(n=3)])
    out = expert_forward(model, images)
    assert out.cls_probs.shape == (3, len(model.anchors), 1)
    assert out.reg_offsets.shape == (3, len(model.anchors), 4)
    assert (out.cls_probs.data > 0).all() and (out.cls_probs.data < 1).all()
    with pytest.raises(DimensionError):
        expert_forward(model, np.zeros((1, 3, 8, 8), dtype=np.float32))


def test_train_expert_is_seeded_and_frozen() -> None:
    samples = tiny_samples(n=4)
    config = TrainConfig(epochs=2, batch_size=2, seed=5)
    a = train_expert(samples, config, tiny_arch(), expert_id="S1")
    b = train_expert(samples, config, tiny_arch(), expert_id="S1")
    assert len(a.history) == 2 and all(math.isfinite(v) for v in a.history)
    assert a.parameters() and not any(p.requires_grad for p in a.parameters())
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)


def test_train_expert_rejects_empty_dataset() -> None:
    with pytest.raises(ValidationError):
        train_expert([], TrainConfig(epochs=1), tiny_arch())


def test_fine_tune_leaves_parent_untouched(tiny_experts) -> None:
    parent = tiny_experts[0]
    before = {k: p.data.copy() for k, p in parent.params.items()}
    tuned = fine_tune(parent, tiny_samples("T1p", 0.5, n=4), TrainConfig(epochs=1, batch_size=2, seed=2))
    assert tuned.expert_id == "S1-ft"
    assert tuned.parent_id == "S1"
    assert not any(p.requires_grad for p in tuned.parameters())
    for k, p in parent.params.items():
        assert np.array_equal(p.data, before[k])
    assert any(not np.array_equal(tuned.params[k].data, before[k]) for k in before)


def test_fine_tune_with_zero_epochs_keeps_parent_weights(tiny_experts) -> None:
    parent = tiny_experts[0]
    tuned = fine_tune(parent, tiny_samples("T1p", 0.5, n=2), TrainConfig(epochs=0, seed=2))
    assert tuned.parent_id == "S1"
    assert tuned.history == []
    for k, p in parent.params.items():
        assert np.array_equal(tuned.params[k].data, p.data)


@pytest.mark.slow
def test_fine_tuning_does_not_lower_few_shot_ap() -> None:
    source = DomainSpec(domain_id="S1", background_hue=0.2, object_hue=0.7)
    few_shot_spec = DomainSpec(domain_id="T1p", background_hue=0.22, object_hue=0.7, object_scale_range=(9.0, 13.0))
    arch = DetectorConfig()
    source_data = generate_domain_dataset(source, 40, seed=1, image_size=(32, 32))
    parent = train_expert(source_data, TrainConfig(epochs=10, seed=1), arch, expert_id="S1")
    few_shot = generate_domain_dataset(few_shot_spec, 30, seed=2, image_size=(32, 32))
    tuned = fine_tune(parent, few_shot, TrainConfig(epochs=10, learning_rate=0.005, seed=2))
    before = evaluate(uniform_ensemble([parent]), few_shot, InferenceConfig()).map
    after = evaluate(uniform_ensemble([tuned]), few_shot, InferenceConfig()).map
    assert after >= before


def test_expert_save_load_round_trip(tmp_path: Path, tiny_experts) -> None:
    model = tiny_experts[1]
    path = save_expert(model, tmp_path / "s2.gfm")
    loaded = load_expert(path)
    assert loaded.expert_id == "S2"
    assert loaded.arch == model.arch
    assert loaded.anchor_config == model.anchor_config
    for name, p in model.params.items():
        assert np.array_equal(loaded.params[name].data, p.data)
    # identical model, identical bytes
    again = save_expert(loaded, tmp_path / "again.gfm")
    assert again.read_bytes() == path.read_bytes()


def test_container_detects_corruption(tmp_path: Path, tiny_experts) -> None:
    path = save_expert(tiny_experts[0], tmp_path / "s1.gfm")
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_expert(path)


def test_container_detects_truncation(tmp_path: Path, tiny_experts) -> None:
    path = save_expert(tiny_experts[0], tmp_path / "s1.gfm")
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ChecksumError):
        load_expert(path)


def test_container_checks_magic_and_version(tmp_path: Path, tiny_experts) -> None:
    path = save_expert(tiny_experts[0], tmp_path / "s1.gfm")
    with pytest.raises(ValidationError, match="GFGT"):
        read_container(path, GATING_MAGIC)
    blob = encode_container(EXPERT_MAGIC, {"kind": "expert"}, {"w": np.ones(2)}, version=7)
    with pytest.raises(IncompatibleVersionError, match="7"):
        decode_container(blob, EXPERT_MAGIC)


def test_container_round_trips_arrays() -> None:
    params = {"b": np.arange(3, dtype=np.float32), "a": np.ones((2, 1, 3), dtype=np.float32)}
    meta, arrays = decode_container(encode_container(EXPERT_MAGIC, {"x": 1}, params), EXPERT_MAGIC)
    assert meta == {"x": 1}
    assert sorted(arrays) == ["a", "b"]
    assert np.array_equal(arrays["a"], params["a"])


def test_check_compatible() -> None:
    a = init_expert(tiny_arch(), 1, "a")
    other = DetectorConfig(image_size=(16, 16), backbone_channels=(4,), head_channels=4, anchor_scales=(8.0,))
    b = init_expert(other, 1, "b")
    check_compatible([a, init_expert(tiny_arch(), 2, "c")])
    with pytest.raises(ValidationError, match="anchor"):
        check_compatible([a, b])
    with pytest.raises(ValidationError):
        check_compatible([])


def test_detection_loss_matches_straight_line_recomputation(rng) -> None:
    anchors = generate_anchors(tiny_arch().anchor_config)
    sample = tiny_samples(n=1, seed=8)[0]
    match = match_dataset(anchors, [sample], 1, pos_iou=0.5, neg_iou=0.4)[0]
    probs = rng.uniform(0.05, 0.95, size=(len(anchors), 1)).astype(np.float32)
    offsets = rng.normal(size=(len(anchors), 4)).astype(np.float32)

    alpha, gamma = 0.25, 2.0
    n_pos = max(1, int((match.labels == 1).sum()))
    l_cls = 0.0
    l_reg = 0.0
    for a in range(len(anchors)):
        if match.labels[a] == -1:
            continue
        p = float(probs[a, 0])
        if match.labels[a] == 1:
            l_cls += -alpha * (1 - p) ** gamma * math.log(p)
            for d in range(4):
                x = abs(float(offsets[a, d]) - float(match.reg_targets[a, d]))
                l_reg += 0.5 * x * x if x < 1 else x - 0.5
        else:
            l_cls += -(1 - alpha) * p**gamma * math.log(1 - p)
    got_reg, got_cls, got_total = detection_loss(Tensor(probs), Tensor(offsets), match).values()
    assert got_cls == pytest.approx(l_cls / n_pos, rel=1e-6)
    assert got_reg == pytest.approx(l_reg / n_pos, rel=1e-6)
    assert got_total == pytest.approx((l_cls + l_reg) / n_pos, rel=1e-6)
