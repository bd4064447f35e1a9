"""Gated fusion of frozen experts.

A gating network looks at the image and produces one softmax weight per
expert. Both heads of every expert are combined with that weight, and the
fused outputs are trained with the same joint loss as a single detector;
only the gate's parameters receive gradients.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .container import GATING_MAGIC, read_container, write_container
from .detector import (
    ExpertModel,
    ExpertOutput,
    LossBreakdown,
    TrainConfig,
    as_image_batch,
    check_compatible,
    check_param_shapes,
    detection_loss,
    expert_forward,
    load_expert,
    match_dataset,
    stack_images,
)
from .domains import SceneSample
from .errors import ConfigError, DivergenceError, ValidationError
from .geometry import AnchorMatch
from .network import ParamDict, backbone_forward, backbone_stride, init_backbone, init_dense, trainable
from .tensor import (
    DTYPE,
    SGD,
    ComputationGraph,
    Parameter,
    Tensor,
    apply_op,
    backward,
    dense,
    no_grad,
    reduce_mean,
    sgd_step,
    softmax,
)
from .utils import FORMAT_VERSION, derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GatingArch:
    image_size: Tuple[int, int] = (32, 32)
    in_channels: int = 3
    channels: Tuple[int, ...] = (8, 16, 16)

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if not self.channels:
            raise ConfigError("gating_channels must list at least one block")
        stride = backbone_stride(self.channels)
        if self.image_size[0] % stride or self.image_size[1] % stride:
            raise ConfigError(f"image size {self.image_size} must be divisible by the gating stride {stride}")

    def to_dict(self) -> Dict[str, Any]:
        return {"image_size": list(self.image_size), "in_channels": self.in_channels, "channels": list(self.channels)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GatingArch":
        return cls(**dict(data))


@dataclass(eq=False)
class GatingModel:
    params: ParamDict
    arch: GatingArch
    expert_ids: Tuple[str, ...]
    seed: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    history: List[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.expert_ids)

    def parameters(self) -> List[Parameter]:
        return trainable(self.params)

    def frozen(self) -> "GatingModel":
        return GatingModel(
            params={k: p.copy(trainable=False) for k, p in self.params.items()},
            arch=self.arch,
            expert_ids=self.expert_ids,
            seed=self.seed,
            config=dict(self.config),
            history=list(self.history),
        )

    def metadata(self) -> Dict[str, Any]:
        return {
            "kind": "gating",
            "format_version": FORMAT_VERSION,
            "expert_ids": list(self.expert_ids),
            "seed": self.seed,
            "arch": self.arch.to_dict(),
            "config": self.config,
        }


@dataclass
class GateWeights:
    """Per-image expert weights, ``[N, n]``; each row lies on the simplex."""

    weights: Tensor

    @property
    def values(self) -> np.ndarray:
        return self.weights.data

    @property
    def n(self) -> int:
        return self.weights.shape[1]


@dataclass
class FusedOutput:
    cls_probs: Tensor
    reg_offsets: Tensor


@dataclass
class ExpertCache:
    """Frozen expert outputs for a fixed image set, stacked along axis 1.

    ``cls`` is ``[N, n, A, C]`` and ``reg`` ``[N, n, A, 4]``.
    """

    expert_ids: Tuple[str, ...]
    cls: np.ndarray
    reg: np.ndarray

    def subset(self, indices: Sequence[int]) -> "ExpertCache":
        idx = list(indices)
        return ExpertCache(
            expert_ids=tuple(self.expert_ids[i] for i in idx),
            cls=np.ascontiguousarray(self.cls[:, idx]),
            reg=np.ascontiguousarray(self.reg[:, idx]),
        )


# ---------------------------------------------------------------------------
# gate


def init_gating(arch: GatingArch, expert_ids: Sequence[str], seed: int) -> GatingModel:
    """Fresh gate; the zero output layer makes every expert start at weight 1/n."""
    if not expert_ids:
        raise ValidationError("a gate needs at least one expert")
    rng = np.random.default_rng(derive_seed(seed, "gate-init"))
    params: ParamDict = {}
    init_backbone(params, rng, arch.in_channels, arch.channels)
    init_dense(params, "output", None, arch.channels[-1], len(expert_ids))
    return GatingModel(params=params, arch=arch, expert_ids=tuple(expert_ids), seed=int(seed))


def gate_logits(gating: GatingModel, images: Any) -> Tensor:
    x = as_image_batch(images, gating.arch.image_size, gating.arch.in_channels)
    feat = backbone_forward(gating.params, x, len(gating.arch.channels))
    pooled = reduce_mean(feat, axis=(2, 3))
    return dense(pooled, gating.params["output.weight"], gating.params["output.bias"])


def compute_gate(gating: GatingModel, images: Any) -> GateWeights:
    return GateWeights(softmax(gate_logits(gating, images), axis=1))


def uniform_gate(batch: int, n: int) -> GateWeights:
    """Softmax of equal logits: the same arithmetic path as a zeroed gate."""
    return GateWeights(softmax(Tensor(np.zeros((batch, n), dtype=DTYPE)), axis=1))


# ---------------------------------------------------------------------------
# fusion


def weighted_sum(gate: Tensor, stack: Tensor) -> Tensor:
    """``sum_i gate[:, i] * stack[:, i]`` accumulated in ascending expert order."""
    if gate.ndim != 2 or stack.ndim < 2 or stack.shape[:2] != gate.shape:
        raise ValidationError(f"gate {gate.shape} does not line up with expert stack {stack.shape}")
    n = gate.shape[1]
    extra = (1,) * (stack.ndim - 2)
    g = gate.data
    out = stack.data[:, 0] * g[:, 0].reshape(-1, *extra)
    for i in range(1, n):
        out = out + stack.data[:, i] * g[:, i].reshape(-1, *extra)

    def _backward(grad: np.ndarray):
        axes = tuple(range(1, grad.ndim))
        d_gate = np.stack([(grad * stack.data[:, i]).sum(axis=axes) for i in range(n)], axis=1)
        d_stack = grad[:, None] * g.reshape(*g.shape, *extra)
        return d_gate, d_stack

    return apply_op("fuse", out, (gate, stack), _backward)


def stack_outputs(outputs: Sequence[ExpertOutput]) -> Tuple[Tensor, Tensor]:
    if not outputs:
        raise ValidationError("fuse needs at least one expert output")
    ref_cls, ref_reg = outputs[0].cls_probs.shape, outputs[0].reg_offsets.shape
    for i, out in enumerate(outputs):
        if out.cls_probs.shape != ref_cls or out.reg_offsets.shape != ref_reg:
            raise ValidationError(
                f"expert {i}: output shapes {out.cls_probs.shape}/{out.reg_offsets.shape} "
                f"differ from expert 0 ({ref_cls}/{ref_reg})"
            )
    cls = Tensor(np.stack([o.cls_probs.data for o in outputs], axis=1))
    reg = Tensor(np.stack([o.reg_offsets.data for o in outputs], axis=1))
    return cls, reg


def fuse_stacked(gate: GateWeights, cls: Any, reg: Any) -> FusedOutput:
    cls_t = cls if isinstance(cls, Tensor) else Tensor(cls)
    reg_t = reg if isinstance(reg, Tensor) else Tensor(reg)
    if cls_t.shape[1] != gate.n:
        raise ValidationError(f"{cls_t.shape[1]} expert outputs for a gate of width {gate.n}")
    return FusedOutput(weighted_sum(gate.weights, cls_t), weighted_sum(gate.weights, reg_t))


def fuse(gate: GateWeights, outputs: Sequence[ExpertOutput]) -> FusedOutput:
    if len(outputs) != gate.n:
        raise ValidationError(f"{len(outputs)} expert outputs for a gate of width {gate.n}")
    cls, reg = stack_outputs(outputs)
    if cls.shape[0] != gate.weights.shape[0]:
        raise ValidationError(f"gate covers {gate.weights.shape[0]} images, outputs cover {cls.shape[0]}")
    return fuse_stacked(gate, cls, reg)


def gating_loss(fused: FusedOutput, matches: AnchorMatch | Sequence[AnchorMatch], config: TrainConfig) -> LossBreakdown:
    return detection_loss(
        fused.cls_probs,
        fused.reg_offsets,
        matches,
        alpha=config.focal_alpha,
        gamma=config.focal_gamma,
    )


# ---------------------------------------------------------------------------
# expert cache


def expert_outputs(expert: ExpertModel, images: np.ndarray, batch_size: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    cls_parts, reg_parts = [], []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            out = expert_forward(expert, images[start : start + batch_size])
            cls_parts.append(out.cls_probs.data)
            reg_parts.append(out.reg_offsets.data)
    return np.concatenate(cls_parts), np.concatenate(reg_parts)


def build_expert_cache(
    experts: Sequence[ExpertModel],
    images: np.ndarray,
    workers: int = 1,
    batch_size: int = 32,
) -> ExpertCache:
    """Run every frozen expert once over ``images``."""
    check_compatible(experts)
    if workers > 1 and len(experts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda e: expert_outputs(e, images, batch_size), experts))
    else:
        results = [expert_outputs(e, images, batch_size) for e in experts]
    logger.debug("cached outputs of %d experts on %d images", len(experts), images.shape[0])
    return ExpertCache(
        expert_ids=tuple(e.expert_id for e in experts),
        cls=np.stack([r[0] for r in results], axis=1),
        reg=np.stack([r[1] for r in results], axis=1),
    )


# ---------------------------------------------------------------------------
# training


def train_gating(
    experts: Sequence[ExpertModel],
    dataset: Sequence[SceneSample],
    config: TrainConfig,
    arch: Optional[GatingArch] = None,
    cache: Optional[ExpertCache] = None,
    snapshot: Optional[Mapping[str, Any]] = None,
    workers: int = 1,
) -> GatingModel:
    """Train a gate over frozen ``experts`` on ``dataset``; returns it frozen."""
    check_compatible(experts)
    if not dataset:
        raise ValidationError("gate training dataset is empty")
    arch = arch or GatingArch(image_size=experts[0].arch.image_size)
    if arch.image_size != experts[0].arch.image_size:
        raise ValidationError(f"gate image size {arch.image_size} != expert image size {experts[0].arch.image_size}")
    expert_ids = [e.expert_id for e in experts]
    images = stack_images(dataset)
    as_image_batch(images[:1], arch.image_size, arch.in_channels)
    if cache is None:
        cache = build_expert_cache(experts, images, workers=workers)
    elif cache.expert_ids != tuple(expert_ids) or cache.cls.shape[0] != len(dataset):
        raise ValidationError("expert cache does not match the experts and dataset being trained on")

    model = init_gating(arch, expert_ids, config.seed)
    model.config = dict(snapshot or {})
    if model.n == 1:
        logger.info("single expert %s: gate is constant, skipping training", expert_ids[0])
        return model.frozen()

    ref = experts[0]
    matches = match_dataset(ref.anchors, dataset, ref.num_classes, config.pos_iou, config.neg_iou)
    optimizer = SGD(
        model.parameters(),
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        max_grad_norm=config.max_grad_norm,
    )
    rng = np.random.default_rng(derive_seed(config.seed, "gate-shuffle"))
    last_finite: Optional[float] = None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad()
            with ComputationGraph() as graph:
                gate = compute_gate(model, images[idx])
                fused = fuse_stacked(gate, cache.cls[idx], cache.reg[idx])
                losses = gating_loss(fused, [matches[i] for i in idx], config)
            total = losses.total.item()
            if not math.isfinite(total):
                raise DivergenceError("gate training loss is not finite", epoch, last_finite)
            try:
                backward(losses.total, graph)
                sgd_step(optimizer)
            except DivergenceError as exc:
                raise DivergenceError(f"gate: {exc}", epoch, last_finite) from exc
            last_finite = total
            epoch_losses.append(total)
        mean_loss = float(np.mean(epoch_losses))
        model.history.append(mean_loss)
        logger.info("gate over %d experts epoch %d/%d: loss %.6f", model.n, epoch, config.epochs, mean_loss)
    return model.frozen()


# ---------------------------------------------------------------------------
# ranking and top-k


@dataclass(frozen=True)
class GateRank:
    index: int
    expert_id: str
    mean_weight: float

    @property
    def mean_weight_pct(self) -> float:
        return self.mean_weight * 100.0


def rank_experts(means: Sequence[float], expert_ids: Optional[Sequence[str]] = None) -> List[GateRank]:
    """Sort experts by mean weight, descending; equal weights keep index order."""
    ids = list(expert_ids) if expert_ids is not None else [str(i) for i in range(len(means))]
    if len(ids) != len(means):
        raise ValidationError(f"{len(means)} weights for {len(ids)} expert ids")
    ranks = [GateRank(i, ids[i], float(m)) for i, m in enumerate(means)]
    return sorted(ranks, key=lambda r: (-r.mean_weight, r.index))


def mean_gate_weights(gating: GatingModel, dataset: Sequence[SceneSample] | np.ndarray, batch_size: int = 32) -> List[GateRank]:
    images = dataset if isinstance(dataset, np.ndarray) else (stack_images(dataset) if dataset else None)
    if images is None or images.shape[0] == 0:
        raise ValidationError("mean_gate_weights needs a non-empty dataset")
    total = np.zeros(gating.n, dtype=np.float64)
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            total += compute_gate(gating, images[start : start + batch_size]).values.astype(np.float64).sum(axis=0)
    return rank_experts(total / images.shape[0], gating.expert_ids)


def select_top_k(ranking: Sequence[GateRank], k: int) -> List[int]:
    """Indices of the ``k`` best-ranked experts, in ascending index order."""
    if not 1 <= k <= len(ranking):
        raise ValidationError(f"k must be in [1, {len(ranking)}], got {k}")
    ordered = sorted(ranking, key=lambda r: (-r.mean_weight, r.index))
    return sorted(r.index for r in ordered[:k])


def ranking_report(target: str, ranking: Sequence[GateRank], selected: Sequence[int] = ()) -> Dict[str, Any]:
    return {
        "target": target,
        "ranking": [{"expert_id": r.expert_id, "mean_weight_pct": r.mean_weight_pct} for r in ranking],
        "selected": [r.expert_id for r in ranking if r.index in set(selected)],
    }


@dataclass(frozen=True)
class EnsembleSpec:
    experts: Tuple[ExpertModel, ...]
    gating: Optional[GatingModel] = None
    label: str = "ensemble"

    def __post_init__(self) -> None:
        object.__setattr__(self, "experts", tuple(self.experts))
        check_compatible(self.experts)
        if self.gating is not None:
            ids = tuple(e.expert_id for e in self.experts)
            if self.gating.n != len(self.experts):
                raise ValidationError(f"gate has {self.gating.n} outputs but the ensemble has {len(self.experts)} experts")
            if self.gating.expert_ids != ids:
                raise ValidationError(
                    f"gate expects experts {list(self.gating.expert_ids)} in that order, got {list(ids)}"
                )
            if self.gating.arch.image_size != self.experts[0].arch.image_size:
                raise ValidationError("gate and experts disagree on image size")

    @property
    def n(self) -> int:
        return len(self.experts)

    @property
    def anchors(self):
        return self.experts[0].anchors

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.experts[0].arch.image_size

    def gate(self, images: np.ndarray) -> GateWeights:
        if self.gating is None:
            return uniform_gate(images.shape[0], self.n)
        return compute_gate(self.gating, images)


@dataclass
class TopKResult:
    ensemble: EnsembleSpec
    first_stage: GatingModel
    ranking: List[GateRank]
    selected: List[int]


def retrain_top_k(
    experts: Sequence[ExpertModel],
    dataset: Sequence[SceneSample],
    k: int,
    config: TrainConfig,
    arch: Optional[GatingArch] = None,
    cache: Optional[ExpertCache] = None,
    first_stage: Optional[GatingModel] = None,
    manual_ids: Optional[Sequence[str]] = None,
    topk_seed: Optional[int] = None,
    snapshot: Optional[Mapping[str, Any]] = None,
    workers: int = 1,
) -> TopKResult:
    """Gate over all experts, rank by mean weight, keep ``k`` and train a fresh gate on them.

    ``manual_ids`` replaces the automatic pick with the named experts.
    """
    experts = list(experts)
    check_compatible(experts)
    if cache is None:
        cache = build_expert_cache(experts, stack_images(dataset), workers=workers)
    if first_stage is None:
        first_stage = train_gating(experts, dataset, config, arch=arch, cache=cache, snapshot=snapshot)
    elif first_stage.expert_ids != tuple(e.expert_id for e in experts):
        raise ValidationError("first-stage gate was trained over a different expert list")
    ranking = mean_gate_weights(first_stage, stack_images(dataset))

    if manual_ids:
        position = {e.expert_id: i for i, e in enumerate(experts)}
        unknown = [x for x in manual_ids if x not in position]
        if unknown:
            raise ValidationError(f"--manual-ids names unknown experts: {unknown}")
        selected = sorted({position[x] for x in manual_ids})
    else:
        selected = select_top_k(ranking, k)
    logger.info("top-%d experts: %s", len(selected), [experts[i].expert_id for i in selected])

    stage_two = replace(config, seed=topk_seed if topk_seed is not None else derive_seed(config.seed, "gate-topk"))
    subset = [experts[i] for i in selected]
    gate = train_gating(subset, dataset, stage_two, arch=arch, cache=cache.subset(selected), snapshot=snapshot)
    ensemble = EnsembleSpec(tuple(subset), gate, label=f"gating_top{len(selected)}")
    return TopKResult(ensemble=ensemble, first_stage=first_stage, ranking=ranking, selected=selected)


def uniform_ensemble(experts: Sequence[ExpertModel], label: str = "average") -> EnsembleSpec:
    return EnsembleSpec(tuple(experts), None, label=label)


# ---------------------------------------------------------------------------
# persistence


def save_gating(model: GatingModel, path: Path) -> Path:
    return write_container(path, GATING_MAGIC, model.metadata(), {k: p.data for k, p in model.params.items()})


def load_gating(path: Path) -> GatingModel:
    metadata, arrays = read_container(path, GATING_MAGIC)
    try:
        arch = GatingArch.from_dict(metadata["arch"])
        expert_ids = tuple(str(x) for x in metadata["expert_ids"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: gating metadata is incomplete: {exc}") from exc
    template = init_gating(arch, expert_ids, 0)
    check_param_shapes(str(path), template.params, arrays)
    params = {name: Parameter(arrays[name], name, trainable=False) for name in sorted(arrays)}
    return GatingModel(
        params=params,
        arch=arch,
        expert_ids=expert_ids,
        seed=int(metadata.get("seed", 0)),
        config=dict(metadata.get("config") or {}),
    )


def assemble_ensemble(expert_paths: Sequence[Path], gating_path: Optional[Path] = None, label: str = "ensemble") -> EnsembleSpec:
    """Load experts (in the given order) and an optional gate into one ensemble."""
    experts = tuple(load_expert(p) for p in expert_paths)
    gating = load_gating(gating_path) if gating_path is not None else None
    return EnsembleSpec(experts, gating, label=label)


def ensemble_outputs(ensemble: EnsembleSpec, images: np.ndarray, cache: Optional[ExpertCache] = None) -> FusedOutput:
    """Fused head outputs for a batch, without recording gradients."""
    with no_grad():
        gate = ensemble.gate(images)
        if cache is None:
            cache = build_expert_cache(ensemble.experts, images)
        return fuse_stacked(gate, cache.cls, cache.reg)
