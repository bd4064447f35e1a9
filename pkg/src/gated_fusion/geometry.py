"""Boxes, IoU, anchors, anchor matching, box coding and NMS.

Boxes are corner coordinates ``(x_min, y_min, x_max, y_max)`` in absolute
pixels with the origin at the top-left of the image.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, ValidationError

logger = logging.getLogger(__name__)

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

# exp() of larger offsets would scale an anchor past any sane image size
BBOX_CLAMP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = [float(v) for v in (self.x_min, self.y_min, self.x_max, self.y_max)]
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"box coordinates must be finite, got {coords}")
        if coords[0] > coords[2] or coords[1] > coords[3]:
            raise ValidationError(f"box needs x_min <= x_max and y_min <= y_max, got {coords}")
        for name, value in zip(("x_min", "y_min", "x_max", "y_max"), coords):
            object.__setattr__(self, name, value)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise ValidationError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if int(self.class_id) < 0:
            raise ValidationError(f"class_id must be >= 0, got {self.class_id}")
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"detection score must be in [0, 1], got {score}")
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", score)

    def to_dict(self) -> dict:
        return {"box": self.box.as_list(), "class": self.class_id, "score": self.score}


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[N, 4]`` and ``[M, 4]`` corner arrays as ``[N, M]`` float64."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


# ---------------------------------------------------------------------------
# anchors


@dataclass(frozen=True)
class AnchorConfig:
    grid_h: int
    grid_w: int
    stride: int
    scales: Tuple[float, ...]
    ratios: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.stride <= 0:
            raise ConfigError(f"anchor stride must be > 0, got {self.stride}")
        if self.grid_h <= 0 or self.grid_w <= 0:
            raise ConfigError(f"anchor grid must be positive, got {self.grid_h}x{self.grid_w}")
        if not self.scales or not self.ratios:
            raise ConfigError("anchor scales and ratios must be non-empty")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise ConfigError(f"anchor scales/ratios must be > 0, got {self.scales} / {self.ratios}")

    @property
    def per_location(self) -> int:
        return len(self.scales) * len(self.ratios)

    @property
    def count(self) -> int:
        return self.grid_h * self.grid_w * self.per_location

    def to_dict(self) -> dict:
        return {
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "stride": self.stride,
            "scales": list(self.scales),
            "ratios": list(self.ratios),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnchorConfig":
        try:
            return cls(
                grid_h=int(data["grid_h"]),
                grid_w=int(data["grid_w"]),
                stride=int(data["stride"]),
                scales=tuple(data["scales"]),
                ratios=tuple(data["ratios"]),
            )
        except KeyError as exc:
            raise ConfigError(f"anchor config is missing field {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class AnchorSet:
    config: AnchorConfig
    boxes: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    def box(self, index: int) -> Box:
        return Box.from_array(self.boxes[index])


def generate_anchors(config: AnchorConfig) -> AnchorSet:
    """Tile anchors over the grid: row-major cells, then scale, then ratio.

    A ratio is height / width, so a ratio-``r`` anchor of scale ``s`` has
    width ``s / sqrt(r)`` and height ``s * sqrt(r)``.
    """
    shapes = []
    for s in config.scales:
        for r in config.ratios:
            root = math.sqrt(r)
            shapes.append((s / root, s * root))
    wh = np.asarray(shapes, dtype=np.float64)

    ys = (np.arange(config.grid_h, dtype=np.float64) + 0.5) * config.stride
    xs = (np.arange(config.grid_w, dtype=np.float64) + 0.5) * config.stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.stack([cx.reshape(-1), cy.reshape(-1)], axis=1)

    cxy = np.repeat(centers, len(shapes), axis=0)
    half = np.tile(wh, (centers.shape[0], 1)) / 2.0
    boxes = np.concatenate([cxy - half, cxy + half], axis=1)
    return AnchorSet(config=config, boxes=boxes)


# ---------------------------------------------------------------------------
# box coding


def _check_positive_extent(name: str, box: np.ndarray) -> None:
    w = box[..., 2] - box[..., 0]
    h = box[..., 3] - box[..., 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValidationError(f"{name} boxes must have positive width and height")


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Row-wise regression targets ``(tx, ty, tw, th)`` of ``gts`` against ``anchors``."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    _check_positive_extent("anchor", anchors)
    _check_positive_extent("ground-truth", gts)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    cxa = anchors[:, 0] + 0.5 * wa
    cya = anchors[:, 1] + 0.5 * ha
    w = gts[:, 2] - gts[:, 0]
    h = gts[:, 3] - gts[:, 1]
    cx = gts[:, 0] + 0.5 * w
    cy = gts[:, 1] + 0.5 * h
    return np.stack([(cx - cxa) / wa, (cy - cya) / ha, np.log(w / wa), np.log(h / ha)], axis=1)


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    if not np.isfinite(offsets).all():
        raise ValidationError("box offsets must be finite")
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    cxa = anchors[:, 0] + 0.5 * wa
    cya = anchors[:, 1] + 0.5 * ha
    cx = offsets[:, 0] * wa + cxa
    cy = offsets[:, 1] * ha + cya
    w = wa * np.exp(np.minimum(offsets[:, 2], BBOX_CLAMP))
    h = ha * np.exp(np.minimum(offsets[:, 3], BBOX_CLAMP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(anchor: Box, gt: Box) -> Tuple[float, float, float, float]:
    row = encode_boxes(np.asarray([anchor.as_list()]), np.asarray([gt.as_list()]))[0]
    return tuple(float(v) for v in row)


def decode_box(anchor: Box, offsets: Sequence[float]) -> Box:
    return Box.from_array(decode_boxes(np.asarray([anchor.as_list()]), np.asarray([offsets]))[0])


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(width))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(height))
    return boxes


# ---------------------------------------------------------------------------
# matching


@dataclass
class AnchorMatch:
    labels: np.ndarray
    gt_index: np.ndarray
    reg_targets: np.ndarray
    cls_targets: np.ndarray
    max_iou: np.ndarray = field(repr=False)

    @property
    def num_anchors(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_positives(self) -> int:
        return int(np.count_nonzero(self.labels == POSITIVE))

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels == POSITIVE

    @property
    def valid_mask(self) -> np.ndarray:
        return self.labels != IGNORE


def _as_box_array(gts: Sequence[Box] | np.ndarray) -> np.ndarray:
    if isinstance(gts, np.ndarray):
        return gts.astype(np.float64).reshape(-1, 4)
    return np.asarray([g.as_list() for g in gts], dtype=np.float64).reshape(-1, 4)


def match_anchors(
    anchors: AnchorSet,
    gt_boxes: Sequence[Box] | np.ndarray,
    gt_classes: Sequence[int],
    num_classes: int = 1,
    pos_iou: float = 0.5,
    neg_iou: float = 0.4,
) -> AnchorMatch:
    """Label every anchor against the ground truth of one image.

    Anchors with max IoU >= ``pos_iou`` are positive, below ``neg_iou``
    negative, anything in between ignored. Each ground-truth box then claims
    its best anchor as a positive, in box order. When that anchor is already
    claimed by an earlier box, the box takes its best unclaimed anchor
    instead. Only anchors that overlap the box can be claimed, so a box that
    overlaps no anchor forces nothing.
    """
    if pos_iou < neg_iou:
        raise ConfigError(f"pos_iou ({pos_iou}) must be >= neg_iou ({neg_iou})")
    n_anchors = len(anchors)
    if n_anchors == 0:
        raise ContractError("cannot match against an empty anchor set")
    gts = _as_box_array(gt_boxes)
    classes = np.asarray(list(gt_classes), dtype=np.int64)
    if classes.shape[0] != gts.shape[0]:
        raise ValidationError(f"{gts.shape[0]} ground-truth boxes but {classes.shape[0]} class ids")
    if classes.size and (classes.min() < 0 or classes.max() >= num_classes):
        raise ValidationError(f"class ids {classes.tolist()} outside [0, {num_classes})")

    labels = np.full(n_anchors, NEGATIVE, dtype=np.int8)
    gt_index = np.full(n_anchors, -1, dtype=np.int64)
    reg_targets = np.zeros((n_anchors, 4), dtype=np.float32)
    cls_targets = np.zeros((n_anchors, num_classes), dtype=np.float32)
    if gts.shape[0] == 0:
        return AnchorMatch(labels, gt_index, reg_targets, cls_targets, np.zeros(n_anchors))

    overlaps = iou_matrix(anchors.boxes, gts)
    best_gt = overlaps.argmax(axis=1)
    max_iou = overlaps[np.arange(n_anchors), best_gt]

    labels[max_iou >= pos_iou] = POSITIVE
    labels[(max_iou >= neg_iou) & (max_iou < pos_iou)] = IGNORE
    gt_index[:] = best_gt

    claimed: set[int] = set()
    for g in range(gts.shape[0]):
        # stable sort keeps the lowest anchor index among equal IoUs
        for a in np.argsort(-overlaps[:, g], kind="stable"):
            a = int(a)
            if overlaps[a, g] <= 0.0:
                break
            if a not in claimed:
                claimed.add(a)
                labels[a] = POSITIVE
                gt_index[a] = g
                break

    pos = labels == POSITIVE
    gt_index[~pos] = -1
    if pos.any():
        reg_targets[pos] = encode_boxes(anchors.boxes[pos], gts[gt_index[pos]]).astype(np.float32)
        cls_targets[np.flatnonzero(pos), classes[gt_index[pos]]] = 1.0
    logger.debug("matched %d anchors: %d positive, %d ignored", n_anchors, int(pos.sum()), int((labels == IGNORE).sum()))
    return AnchorMatch(labels, gt_index, reg_targets, cls_targets, max_iou)


# ---------------------------------------------------------------------------
# nms


def nms_order(detections: Sequence[Detection]) -> List[int]:
    """Indices sorted by score desc, then x_min asc, y_min asc, input position."""
    return sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].score, detections[i].box.x_min, detections[i].box.y_min, i),
    )


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5, per_class: bool = True) -> List[Detection]:
    """Greedy non-maximum suppression.

    A candidate is dropped when it overlaps an already kept detection (of the
    same class when ``per_class``) with IoU >= ``iou_threshold``.
    """
    if not detections:
        return []
    kept: List[Detection] = []
    for i in nms_order(detections):
        cand = detections[i]
        suppressed = False
        for k in kept:
            if per_class and k.class_id != cand.class_id:
                continue
            if iou(k.box, cand.box) >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(cand)
    return kept
