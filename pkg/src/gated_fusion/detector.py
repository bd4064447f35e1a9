"""Single-stage anchor detector used for every expert.

A small conv backbone feeds two heads evaluated at every feature-grid cell:
a classification head emitting per-anchor, per-class sigmoid probabilities
and a regression head emitting per-anchor box offsets. Experts are trained
with focal loss plus smooth-L1 on positive anchors; the same joint loss is
reused unchanged to train the gate on fused outputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .container import EXPERT_MAGIC, read_container, write_container
from .domains import SceneSample
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, ValidationError
from .geometry import AnchorConfig, AnchorMatch, AnchorSet, generate_anchors, match_anchors
from .network import ParamDict, backbone_forward, backbone_stride, init_backbone, init_conv, trainable
from .tensor import (
    DTYPE,
    SGD,
    ComputationGraph,
    Parameter,
    Tensor,
    add,
    apply_op,
    as_tensor,
    backward,
    conv2d,
    relu,
    reshape,
    sgd_step,
    sigmoid,
    transpose,
)
from .utils import FORMAT_VERSION, derive_seed

logger = logging.getLogger(__name__)

PROB_EPS = 1e-6
PRIOR_PROBABILITY = 0.01


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    max_grad_norm: Optional[float] = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.focal_alpha < 1.0:
            raise ConfigError(f"focal_alpha must be in (0, 1), got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.pos_iou < self.neg_iou:
            raise ConfigError(f"pos_iou ({self.pos_iou}) must be >= neg_iou ({self.neg_iou})")


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture shared by every expert of one ensemble."""

    image_size: Tuple[int, int] = (32, 32)
    in_channels: int = 3
    backbone_channels: Tuple[int, ...] = (8, 16)
    head_channels: int = 16
    anchor_scales: Tuple[float, ...] = (8.0, 12.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    num_classes: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "backbone_channels", tuple(int(v) for v in self.backbone_channels))
        object.__setattr__(self, "anchor_scales", tuple(float(v) for v in self.anchor_scales))
        object.__setattr__(self, "anchor_ratios", tuple(float(v) for v in self.anchor_ratios))
        if not self.backbone_channels:
            raise ConfigError("backbone_channels must list at least one block")
        stride = backbone_stride(self.backbone_channels)
        h, w = self.image_size
        if h % stride or w % stride:
            raise ConfigError(f"image size {h}x{w} must be divisible by the backbone stride {stride}")
        if self.num_classes < 1 or self.head_channels < 1:
            raise ConfigError("num_classes and head_channels must be >= 1")

    @property
    def stride(self) -> int:
        return backbone_stride(self.backbone_channels)

    @property
    def anchor_config(self) -> AnchorConfig:
        h, w = self.image_size
        return AnchorConfig(
            grid_h=h // self.stride,
            grid_w=w // self.stride,
            stride=self.stride,
            scales=self.anchor_scales,
            ratios=self.anchor_ratios,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_size": list(self.image_size),
            "in_channels": self.in_channels,
            "backbone_channels": list(self.backbone_channels),
            "head_channels": self.head_channels,
            "anchor_scales": list(self.anchor_scales),
            "anchor_ratios": list(self.anchor_ratios),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DetectorConfig":
        return cls(**dict(data))


@dataclass(eq=False)
class ExpertModel:
    params: ParamDict
    arch: DetectorConfig
    expert_id: str
    seed: int = 0
    parent_id: Optional[str] = None
    config: Dict[str, Any] = field(default_factory=dict)
    history: List[float] = field(default_factory=list)
    _anchors: Optional[AnchorSet] = field(default=None, repr=False)

    @property
    def anchor_config(self) -> AnchorConfig:
        return self.arch.anchor_config

    @property
    def anchors(self) -> AnchorSet:
        if self._anchors is None:
            self._anchors = generate_anchors(self.anchor_config)
        return self._anchors

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def parameters(self) -> List[Parameter]:
        return trainable(self.params)

    def with_params(self, trainable_flag: bool, **overrides: Any) -> "ExpertModel":
        fields = dict(
            params={k: p.copy(trainable=trainable_flag) for k, p in self.params.items()},
            arch=self.arch,
            expert_id=self.expert_id,
            seed=self.seed,
            parent_id=self.parent_id,
            config=dict(self.config),
            history=list(self.history),
        )
        fields.update(overrides)
        return ExpertModel(**fields)

    def frozen(self) -> "ExpertModel":
        return self.with_params(False)

    def metadata(self) -> Dict[str, Any]:
        return {
            "kind": "expert",
            "format_version": FORMAT_VERSION,
            "expert_id": self.expert_id,
            "parent_id": self.parent_id,
            "seed": self.seed,
            "arch": self.arch.to_dict(),
            "anchors": self.anchor_config.to_dict(),
            "num_classes": self.num_classes,
            "config": self.config,
        }


@dataclass
class ExpertOutput:
    """Batched head outputs: ``cls_probs`` ``[N, A, C]`` in [0, 1], ``reg_offsets`` ``[N, A, 4]``."""

    cls_probs: Tensor
    reg_offsets: Tensor


@dataclass
class LossBreakdown:
    l_reg: Tensor
    l_cls: Tensor
    total: Tensor

    def values(self) -> Tuple[float, float, float]:
        return self.l_reg.item(), self.l_cls.item(), self.total.item()


# ---------------------------------------------------------------------------
# model


def init_expert(arch: DetectorConfig, seed: int, expert_id: str) -> ExpertModel:
    rng = np.random.default_rng(derive_seed(seed, "expert-init", expert_id))
    params: ParamDict = {}
    init_backbone(params, rng, arch.in_channels, arch.backbone_channels)
    feat = arch.backbone_channels[-1]
    per_loc = arch.anchor_config.per_location
    init_conv(params, "cls_head.hidden", rng, feat, arch.head_channels)
    init_conv(params, "cls_head.out", rng, arch.head_channels, per_loc * arch.num_classes)
    init_conv(params, "reg_head.hidden", rng, feat, arch.head_channels)
    init_conv(params, "reg_head.out", rng, arch.head_channels, per_loc * 4)
    prior = -math.log((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)
    params["cls_head.out.bias"].data[:] = DTYPE(prior)
    return ExpertModel(params=params, arch=arch, expert_id=expert_id, seed=int(seed))


def as_image_batch(images: Any, image_size: Tuple[int, int], channels: int = 3) -> Tensor:
    x = as_tensor(images)
    if x.ndim == 3:
        x = Tensor(x.data[None])
    expected = (channels, *image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise DimensionError(f"expected images shaped (N, {channels}, {image_size[0]}, {image_size[1]}), got {x.shape}")
    return x


def _head(params: ParamDict, name: str, feat: Tensor, width: int) -> Tensor:
    h = relu(conv2d(feat, params[f"{name}.hidden.weight"], params[f"{name}.hidden.bias"], padding=1))
    out = conv2d(h, params[f"{name}.out.weight"], params[f"{name}.out.bias"], padding=1)
    n, _, gh, gw = out.shape
    # [N, A_loc*W, gh, gw] -> [N, gh*gw*A_loc, W], matching anchor order
    return reshape(transpose(out, (0, 2, 3, 1)), (n, -1, width))


def expert_forward(model: ExpertModel, images: Any) -> ExpertOutput:
    x = as_image_batch(images, model.arch.image_size, model.arch.in_channels)
    feat = backbone_forward(model.params, x, len(model.arch.backbone_channels))
    cls_probs = sigmoid(_head(model.params, "cls_head", feat, model.num_classes))
    reg_offsets = _head(model.params, "reg_head", feat, 4)
    return ExpertOutput(cls_probs, reg_offsets)


# ---------------------------------------------------------------------------
# losses


def _row_mask(mask: Optional[np.ndarray], rows: int) -> np.ndarray:
    if mask is None:
        return np.ones(rows, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != rows:
        raise DimensionError(f"mask has {mask.shape[0]} rows, expected {rows}")
    return mask


def focal_loss(
    probs: Tensor,
    targets: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    valid: Optional[np.ndarray] = None,
    normalizer: Optional[float] = None,
) -> Tensor:
    """Sigmoid focal loss summed over valid rows and divided by ``normalizer``.

    Rows are anchors, columns classes. The default normalizer is the number
    of valid rows with a positive target, at least 1.
    """
    if gamma < 0:
        raise ConfigError(f"focal gamma must be >= 0, got {gamma}")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != probs.shape:
        raise DimensionError(f"focal_loss: probs {probs.shape} vs targets {targets.shape}")
    flat_t = targets.reshape(-1, targets.shape[-1]) if targets.ndim > 1 else targets.reshape(-1, 1)
    rows = _row_mask(valid, flat_t.shape[0])
    if normalizer is None:
        normalizer = max(1.0, float(np.count_nonzero((flat_t > 0.5).any(axis=1) & rows)))
    weight = np.broadcast_to(rows[:, None], flat_t.shape).reshape(targets.shape).astype(np.float64)

    p_raw = probs.data.astype(np.float64)
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    positive = targets > 0.5
    p_t = np.where(positive, p, 1.0 - p)
    alpha_t = np.where(positive, alpha, 1.0 - alpha)
    one_minus = 1.0 - p_t
    log_pt = np.log(p_t)
    per_elem = -alpha_t * one_minus**gamma * log_pt
    value = float(np.sum(per_elem * weight)) / normalizer

    def _backward(g: np.ndarray):
        if gamma == 0:
            d_pt = -alpha_t / p_t
        else:
            d_pt = alpha_t * (gamma * one_minus ** (gamma - 1.0) * log_pt - one_minus**gamma / p_t)
        d_p = np.where(positive, d_pt, -d_pt)
        inside = (p_raw >= PROB_EPS) & (p_raw <= 1.0 - PROB_EPS)
        grad = d_p * inside * weight * (float(np.asarray(g).reshape(-1)[0]) / normalizer)
        return (grad.astype(DTYPE),)

    return apply_op("focal_loss", np.asarray(value, dtype=DTYPE), (probs,), _backward)


def smooth_l1_loss(
    pred: Tensor,
    target: np.ndarray,
    mask: Optional[np.ndarray] = None,
    normalizer: Optional[float] = None,
) -> Tensor:
    """Smooth-L1 (Huber, delta 1) over masked rows, divided by the masked row count (min 1)."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise DimensionError(f"smooth_l1_loss: pred {pred.shape} vs target {target.shape}")
    flat = target.reshape(-1, target.shape[-1]) if target.ndim > 1 else target.reshape(-1, 1)
    rows = _row_mask(mask, flat.shape[0])
    if normalizer is None:
        normalizer = max(1.0, float(np.count_nonzero(rows)))
    weight = np.broadcast_to(rows[:, None], flat.shape).reshape(target.shape).astype(np.float64)

    x = pred.data.astype(np.float64) - target
    ax = np.abs(x)
    quadratic = ax < 1.0
    per_elem = np.where(quadratic, 0.5 * x * x, ax - 0.5)
    value = float(np.sum(per_elem * weight)) / normalizer

    def _backward(g: np.ndarray):
        d = np.where(quadratic, x, np.sign(x))
        return ((d * weight * (float(np.asarray(g).reshape(-1)[0]) / normalizer)).astype(DTYPE),)

    return apply_op("smooth_l1_loss", np.asarray(value, dtype=DTYPE), (pred,), _backward)


def stack_matches(matches: Sequence[AnchorMatch]) -> AnchorMatch:
    if not matches:
        raise ContractError("no anchor matches to stack")
    return AnchorMatch(
        labels=np.concatenate([m.labels for m in matches]),
        gt_index=np.concatenate([m.gt_index for m in matches]),
        reg_targets=np.concatenate([m.reg_targets for m in matches]),
        cls_targets=np.concatenate([m.cls_targets for m in matches]),
        max_iou=np.concatenate([m.max_iou for m in matches]),
    )


def detection_loss(
    cls_probs: Tensor,
    reg_offsets: Tensor,
    matches: AnchorMatch | Sequence[AnchorMatch],
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> LossBreakdown:
    """Joint loss ``L = l_reg + l_cls`` for a batch.

    ``cls_probs`` is ``[N, A, C]`` (or ``[A, C]``), ``reg_offsets`` likewise
    with 4 columns; ``matches`` holds one :class:`AnchorMatch` per image.
    Both terms are normalised by the batch's positive-anchor count (min 1).
    """
    match = matches if isinstance(matches, AnchorMatch) else stack_matches(matches)
    n_cls = cls_probs.shape[-1]
    if match.num_anchors == 0:
        raise ContractError("detection_loss needs at least one anchor")
    flat_cls = reshape(cls_probs, (-1, n_cls))
    flat_reg = reshape(reg_offsets, (-1, 4))
    if flat_cls.shape[0] != match.num_anchors or flat_reg.shape[0] != match.num_anchors:
        raise DimensionError(
            f"outputs cover {flat_cls.shape[0]} anchors but the match covers {match.num_anchors}"
        )
    if match.cls_targets.shape[1] != n_cls:
        raise DimensionError(f"outputs have {n_cls} classes, targets {match.cls_targets.shape[1]}")
    normalizer = max(1.0, float(match.num_positives))
    l_cls = focal_loss(flat_cls, match.cls_targets, alpha, gamma, valid=match.valid_mask, normalizer=normalizer)
    l_reg = smooth_l1_loss(flat_reg, match.reg_targets, mask=match.positive_mask, normalizer=normalizer)
    return LossBreakdown(l_reg=l_reg, l_cls=l_cls, total=add(l_reg, l_cls))


# ---------------------------------------------------------------------------
# training


def match_dataset(
    anchors: AnchorSet,
    dataset: Sequence[SceneSample],
    num_classes: int,
    pos_iou: float,
    neg_iou: float,
) -> List[AnchorMatch]:
    return [
        match_anchors(anchors, s.gt_array(), s.classes, num_classes=num_classes, pos_iou=pos_iou, neg_iou=neg_iou)
        for s in dataset
    ]


def stack_images(dataset: Sequence[SceneSample]) -> np.ndarray:
    return np.stack([s.image for s in dataset]).astype(DTYPE)


def _fit(model: ExpertModel, dataset: Sequence[SceneSample], config: TrainConfig, stream: str) -> ExpertModel:
    if not dataset:
        raise ValidationError(f"{model.expert_id}: training dataset is empty")
    images = stack_images(dataset)
    as_image_batch(images[:1], model.arch.image_size, model.arch.in_channels)
    matches = match_dataset(model.anchors, dataset, model.num_classes, config.pos_iou, config.neg_iou)
    optimizer = SGD(
        model.parameters(),
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        max_grad_norm=config.max_grad_norm,
    )
    rng = np.random.default_rng(derive_seed(config.seed, stream, model.expert_id))
    last_finite: Optional[float] = None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad()
            with ComputationGraph() as graph:
                out = expert_forward(model, images[idx])
                losses = detection_loss(
                    out.cls_probs,
                    out.reg_offsets,
                    [matches[i] for i in idx],
                    alpha=config.focal_alpha,
                    gamma=config.focal_gamma,
                )
            total = losses.total.item()
            if not math.isfinite(total):
                raise DivergenceError(f"{model.expert_id}: training loss is not finite", epoch, last_finite)
            try:
                backward(losses.total, graph)
                sgd_step(optimizer)
            except DivergenceError as exc:
                raise DivergenceError(f"{model.expert_id}: {exc}", epoch, last_finite) from exc
            last_finite = total
            epoch_losses.append(total)
            logger.debug("%s epoch %d batch %d: loss %.6f", model.expert_id, epoch, start, total)
        mean_loss = float(np.mean(epoch_losses))
        model.history.append(mean_loss)
        logger.info("%s epoch %d/%d: loss %.6f", model.expert_id, epoch, config.epochs, mean_loss)
    return model


def train_expert(
    dataset: Sequence[SceneSample],
    config: TrainConfig,
    arch: DetectorConfig = DetectorConfig(),
    expert_id: str = "expert",
    snapshot: Optional[Mapping[str, Any]] = None,
) -> ExpertModel:
    """Train one detector from scratch and return it frozen."""
    if not dataset:
        raise ValidationError(f"{expert_id}: training dataset is empty")
    model = init_expert(arch, config.seed, expert_id)
    model.config = dict(snapshot or {})
    _fit(model, dataset, config, "expert-shuffle")
    return model.frozen()


def fine_tune(
    model: ExpertModel,
    few_shot: Sequence[SceneSample],
    config: TrainConfig,
    expert_id: Optional[str] = None,
    snapshot: Optional[Mapping[str, Any]] = None,
) -> ExpertModel:
    """Continue training every layer of ``model`` on ``few_shot`` samples."""
    if not few_shot:
        raise ValidationError(f"{model.expert_id}: fine-tuning dataset is empty")
    tuned = model.with_params(
        True,
        expert_id=expert_id or f"{model.expert_id}-ft",
        parent_id=model.expert_id,
        seed=int(config.seed),
        config=dict(snapshot or model.config),
        history=[],
    )
    _fit(tuned, few_shot, config, "finetune-shuffle")
    return tuned.frozen()


# ---------------------------------------------------------------------------
# persistence


def save_expert(model: ExpertModel, path: Path) -> Path:
    return write_container(path, EXPERT_MAGIC, model.metadata(), {k: p.data for k, p in model.params.items()})


def check_param_shapes(owner: str, expected: ParamDict, found: Mapping[str, np.ndarray]) -> None:
    missing = sorted(set(expected) - set(found))
    extra = sorted(set(found) - set(expected))
    if missing or extra:
        raise ValidationError(f"{owner}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, p in expected.items():
        if tuple(found[name].shape) != p.shape:
            raise ValidationError(f"{owner}: parameter {name} has shape {tuple(found[name].shape)}, expected {p.shape}")


def load_expert(path: Path) -> ExpertModel:
    metadata, arrays = read_container(path, EXPERT_MAGIC)
    try:
        arch = DetectorConfig.from_dict(metadata["arch"])
        stored_anchors = AnchorConfig.from_dict(metadata["anchors"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: model metadata is incomplete: {exc}") from exc
    if stored_anchors != arch.anchor_config:
        raise ValidationError(f"{path}: stored anchor config does not match the architecture")
    expert_id = str(metadata.get("expert_id", path.stem))
    template = init_expert(arch, 0, expert_id)
    check_param_shapes(str(path), template.params, arrays)
    params = {name: Parameter(arrays[name], name, trainable=False) for name in sorted(arrays)}
    return ExpertModel(
        params=params,
        arch=arch,
        expert_id=expert_id,
        seed=int(metadata.get("seed", 0)),
        parent_id=metadata.get("parent_id"),
        config=dict(metadata.get("config") or {}),
    )


def check_compatible(experts: Sequence[ExpertModel]) -> None:
    """All experts of an ensemble must share input size, anchors and classes."""
    if not experts:
        raise ValidationError("an ensemble needs at least one expert")
    ref = experts[0]
    for i, e in enumerate(experts[1:], start=1):
        if e.arch.image_size != ref.arch.image_size:
            raise ValidationError(f"expert {i} ({e.expert_id}): image size {e.arch.image_size} != {ref.arch.image_size}")
        if e.anchor_config != ref.anchor_config:
            raise ValidationError(f"expert {i} ({e.expert_id}): anchor config differs from expert 0")
        if e.num_classes != ref.num_classes:
            raise ValidationError(f"expert {i} ({e.expert_id}): {e.num_classes} classes != {ref.num_classes}")
