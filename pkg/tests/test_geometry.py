"""Tests for `gated_fusion.geometry`: IoU, anchors, box coding, matching and NMS."""

from __future__ import annotations

import math

import numpy as np
import pytest

from gated_fusion.errors import ConfigError, ValidationError
from gated_fusion.geometry import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    AnchorConfig,
    AnchorSet,
    Box,
    Detection,
    clip_boxes,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    generate_anchors,
    iou,
    iou_matrix,
    match_anchors,
    nms,
)


def test_iou_basic_cases() -> None:
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, Box(20, 20, 30, 30)) == 0.0
    # touching edges do not overlap
    assert iou(a, Box(10, 0, 20, 10)) == 0.0
    assert iou(a, Box(5, 0, 15, 10)) == pytest.approx(50 / 150)


def test_iou_zero_area_box_is_zero() -> None:
    assert iou(Box(1, 1, 1, 5), Box(0, 0, 10, 10)) == 0.0


def test_iou_matrix_agrees_with_scalar(rng) -> None:
    xy = rng.uniform(0, 20, size=(6, 2))
    wh = rng.uniform(1, 10, size=(6, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    mat = iou_matrix(boxes[:3], boxes[3:])
    for i in range(3):
        for j in range(3):
            assert mat[i, j] == pytest.approx(iou(Box.from_array(boxes[i]), Box.from_array(boxes[3 + j])))


def test_box_validation() -> None:
    with pytest.raises(ValidationError):
        Box(5, 0, 1, 1)
    with pytest.raises(ValidationError):
        Box(0, 0, math.nan, 1)
    with pytest.raises(ValidationError):
        Detection(Box(0, 0, 1, 1), 0, 1.5)


def test_generate_anchors_order_and_shapes() -> None:
    config = AnchorConfig(grid_h=2, grid_w=3, stride=8, scales=(8.0,), ratios=(0.5, 1.0, 2.0))
    anchors = generate_anchors(config)
    assert len(anchors) == config.count == 2 * 3 * 3
    # first cell centre (4, 4); ratio 0.5 is wide, ratio 2 is tall
    wide, square, tall = anchors.boxes[:3]
    assert (wide[0] + wide[2]) / 2 == pytest.approx(4.0)
    assert wide[2] - wide[0] == pytest.approx(8 / math.sqrt(0.5))
    assert wide[3] - wide[1] == pytest.approx(8 * math.sqrt(0.5))
    np.testing.assert_allclose(square, [0, 0, 8, 8])
    assert tall[3] - tall[1] > tall[2] - tall[0]
    # row-major: the next cell moves along x
    nxt = anchors.boxes[3]
    assert (nxt[0] + nxt[2]) / 2 == pytest.approx(12.0)
    assert (nxt[1] + nxt[3]) / 2 == pytest.approx(4.0)


def test_anchor_config_validation() -> None:
    with pytest.raises(ConfigError):
        AnchorConfig(grid_h=0, grid_w=2, stride=8, scales=(8,), ratios=(1,))
    with pytest.raises(ConfigError):
        AnchorConfig(grid_h=2, grid_w=2, stride=8, scales=(), ratios=(1,))
    with pytest.raises(ConfigError):
        AnchorConfig(grid_h=2, grid_w=2, stride=8, scales=(8,), ratios=(-1,))


def test_encode_decode_inverse(rng) -> None:
    anchors = np.array([[0, 0, 8, 8], [4, 4, 20, 12]], dtype=np.float64)
    gts = np.array([[1, 2, 9, 7], [3, 3, 25, 18]], dtype=np.float64)
    offsets = encode_boxes(anchors, gts)
    np.testing.assert_allclose(decode_boxes(anchors, offsets), gts, atol=1e-9)


def test_encode_identity_is_zero() -> None:
    a = Box(2, 2, 10, 6)
    assert encode_box(a, a) == pytest.approx((0.0, 0.0, 0.0, 0.0))
    assert decode_box(a, (0, 0, 0, 0)) == a


def test_encode_rejects_degenerate_boxes() -> None:
    with pytest.raises(ValidationError):
        encode_box(Box(0, 0, 0, 5), Box(0, 0, 4, 4))


def test_decode_clamps_huge_scale() -> None:
    box = decode_box(Box(0, 0, 16, 16), (0, 0, 50.0, 50.0))
    assert math.isfinite(box.width)
    assert box.width == pytest.approx(1000.0)


def test_clip_boxes() -> None:
    clipped = clip_boxes(np.array([[-5, -1, 40, 10]]), height=32, width=30)
    np.testing.assert_allclose(clipped, [[0, 0, 30, 10]])


def _anchor_set():
    return generate_anchors(AnchorConfig(grid_h=4, grid_w=4, stride=8, scales=(8.0, 12.0), ratios=(0.5, 1.0, 2.0)))


def test_match_anchors_labels_and_targets() -> None:
    anchors = _anchor_set()
    gt = Box(0, 0, 8, 8)
    match = match_anchors(anchors, [gt], [0])
    assert match.labels[1] == POSITIVE  # exact square anchor at the first cell
    assert match.gt_index[1] == 0
    np.testing.assert_allclose(match.reg_targets[1], 0.0, atol=1e-6)
    assert match.cls_targets[1, 0] == 1.0
    assert (match.cls_targets[match.labels != POSITIVE] == 0).all()
    assert set(np.unique(match.labels)) <= {POSITIVE, NEGATIVE, IGNORE}
    assert (match.gt_index[match.labels != POSITIVE] == -1).all()


def test_every_gt_gets_a_positive_even_when_small() -> None:
    anchors = _anchor_set()
    gts = [Box(1, 1, 4, 3), Box(20, 20, 22, 30)]
    match = match_anchors(anchors, gts, [0, 0])
    assert set(match.gt_index[match.positive_mask].tolist()) == {0, 1}


def test_shared_best_anchor_goes_to_the_first_box() -> None:
    anchors = _anchor_set()
    gts = [Box(0, 0, 8, 8), Box(0.5, 0.5, 8.5, 8.5)]
    match = match_anchors(anchors, gts, [0, 0], pos_iou=0.95, neg_iou=0.4)
    assert match.gt_index[1] == 0
    # the second box claimed some other anchor
    assert 1 in match.gt_index[match.positive_mask]


def test_box_that_overlaps_no_anchor_forces_nothing() -> None:
    anchors = generate_anchors(AnchorConfig(grid_h=1, grid_w=1, stride=8, scales=(8.0,), ratios=(1.0,)))
    match = match_anchors(anchors, [Box(20, 20, 28, 28)], [0])
    assert match.num_positives == 0
    assert (match.labels == NEGATIVE).all()
    assert match.max_iou.tolist() == [0.0]


def test_match_with_no_ground_truth_is_all_negative() -> None:
    anchors = _anchor_set()
    match = match_anchors(anchors, [], [])
    assert (match.labels == NEGATIVE).all()
    assert match.num_positives == 0


def test_match_validates_inputs() -> None:
    anchors = _anchor_set()
    with pytest.raises(ConfigError):
        match_anchors(anchors, [Box(0, 0, 8, 8)], [0], pos_iou=0.3, neg_iou=0.4)
    with pytest.raises(ValidationError):
        match_anchors(anchors, [Box(0, 0, 8, 8)], [1], num_classes=1)
    with pytest.raises(ValidationError):
        match_anchors(anchors, [Box(0, 0, 8, 8)], [0, 0])


def test_nms_suppresses_overlaps_per_class() -> None:
    dets = [
        Detection(Box(0, 0, 10, 10), 0, 0.9),
        Detection(Box(1, 1, 11, 11), 0, 0.8),
        Detection(Box(1, 1, 11, 11), 1, 0.7),
        Detection(Box(50, 50, 60, 60), 0, 0.6),
    ]
    kept = nms(dets, 0.5)
    assert kept == [dets[0], dets[2], dets[3]]
    assert nms(dets, 0.5, per_class=False) == [dets[0], dets[3]]


def test_nms_tie_break_prefers_left_then_top() -> None:
    right = Detection(Box(4, 0, 14, 10), 0, 0.5)
    left = Detection(Box(3, 0, 13, 10), 0, 0.5)
    assert nms([right, left], 0.5) == [left]


def test_nms_identical_boxes_keep_first() -> None:
    a = Detection(Box(0, 0, 10, 10), 0, 0.5)
    b = Detection(Box(0, 0, 10, 10), 0, 0.5)
    kept = nms([a, b], 0.5)
    assert len(kept) == 1 and kept[0] is a


def _nms_reference(boxes: np.ndarray, classes: np.ndarray, scores: np.ndarray, thr: float) -> list:
    """Repeatedly take the best remaining candidate and strike every overlap with it."""
    remaining = list(range(len(scores)))
    overlaps = iou_matrix(boxes, boxes)
    kept = []
    while remaining:
        best = min(remaining, key=lambda i: (-scores[i], boxes[i, 0], boxes[i, 1], i))
        kept.append(best)
        remaining = [
            i for i in remaining if i != best and not (classes[i] == classes[best] and overlaps[best, i] >= thr)
        ]
    return kept


def test_nms_matches_reference_on_random_instances() -> None:
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(0, 21))
        xy = rng.integers(0, 12, size=(n, 2)).astype(np.float64)
        wh = rng.integers(1, 8, size=(n, 2)).astype(np.float64)
        boxes = np.concatenate([xy, xy + wh], axis=1)
        classes = rng.integers(0, 2, size=n)
        # coarse scores force ties
        scores = rng.integers(1, 5, size=n) / 4.0
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        dets = [Detection(Box.from_array(b), int(c), float(s)) for b, c, s in zip(boxes, classes, scores)]
        position = {id(d): i for i, d in enumerate(dets)}
        got = [position[id(d)] for d in nms(dets, thr)]
        assert got == _nms_reference(boxes, classes, scores, thr)


def _match_reference(anchors: np.ndarray, gts: np.ndarray, pos_iou: float, neg_iou: float):
    """Scalar-IoU labelling followed by one forced positive per overlapping box, in box order."""
    n = len(anchors)
    overlaps = [[iou(Box.from_array(a), Box.from_array(g)) for g in gts] for a in anchors]
    labels, owner = [], []
    for row in overlaps:
        best = max(range(len(gts)), key=lambda g: (row[g], -g))
        labels.append(POSITIVE if row[best] >= pos_iou else IGNORE if row[best] >= neg_iou else NEGATIVE)
        owner.append(best)
    claimed = set()
    for g in range(len(gts)):
        free = [i for i in range(n) if i not in claimed and overlaps[i][g] > 0]
        if not free:
            continue
        a = max(free, key=lambda i: (overlaps[i][g], -i))
        claimed.add(a)
        labels[a] = POSITIVE
        owner[a] = g
    return labels, [o if lab == POSITIVE else -1 for lab, o in zip(labels, owner)]


def test_match_anchors_matches_brute_force_assignment() -> None:
    rng = np.random.default_rng(31)
    dummy = AnchorConfig(grid_h=1, grid_w=1, stride=8, scales=(8.0,), ratios=(1.0,))
    for _ in range(200):
        xy = rng.integers(0, 24, size=(20, 2))
        boxes = np.concatenate([xy, xy + rng.integers(2, 10, size=(20, 2))], axis=1).astype(np.float64)
        gxy = rng.integers(0, 24, size=(3, 2))
        gts = np.concatenate([gxy, gxy + rng.integers(2, 10, size=(3, 2))], axis=1).astype(np.float64)
        match = match_anchors(AnchorSet(dummy, boxes), gts, [0, 0, 0], pos_iou=0.5, neg_iou=0.3)
        labels, owners = _match_reference(boxes, gts, 0.5, 0.3)
        assert match.labels.tolist() == labels
        assert match.gt_index.tolist() == owners
