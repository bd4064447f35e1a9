"""Inference post-processing and detection metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .detector import ExpertModel, stack_images
from .domains import SceneSample
from .errors import ConfigError, ValidationError
from .gating import EnsembleSpec, ExpertCache, build_expert_cache, ensemble_outputs, uniform_ensemble
from .geometry import AnchorSet, Box, Detection, clip_boxes, decode_boxes, iou, nms

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferenceConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    per_class: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError(f"nms_iou must be in [0, 1], got {self.nms_iou}")
        if self.max_detections < 1:
            raise ConfigError(f"max_detections must be >= 1, got {self.max_detections}")


# ---------------------------------------------------------------------------
# inference


def postprocess(
    cls_probs: np.ndarray,
    reg_offsets: np.ndarray,
    anchors: AnchorSet,
    image_size: Tuple[int, int],
    config: InferenceConfig,
) -> List[Detection]:
    """Threshold, decode, clip and suppress one image's ``[A, C]`` / ``[A, 4]`` outputs.

    An anchor survives only when its best class probability is strictly
    above ``score_threshold``.
    """
    cls_probs = np.asarray(cls_probs)
    reg_offsets = np.asarray(reg_offsets)
    if cls_probs.shape[0] != len(anchors) or reg_offsets.shape != (len(anchors), 4):
        raise ValidationError(
            f"outputs {cls_probs.shape}/{reg_offsets.shape} do not match {len(anchors)} anchors"
        )
    scores = cls_probs.max(axis=1)
    keep = np.flatnonzero(scores > config.score_threshold)
    if keep.size == 0:
        return []
    labels = cls_probs[keep].argmax(axis=1)
    boxes = clip_boxes(decode_boxes(anchors.boxes[keep], reg_offsets[keep]), *image_size)
    candidates = [
        Detection(Box.from_array(b), int(c), min(1.0, float(s)))
        for b, c, s in zip(boxes, labels, scores[keep])
    ]
    return nms(candidates, config.nms_iou, per_class=config.per_class)[: config.max_detections]


def predict(
    ensemble: EnsembleSpec,
    images: np.ndarray,
    config: InferenceConfig,
    cache: Optional[ExpertCache] = None,
) -> List[List[Detection]]:
    if images.ndim == 3:
        images = images[None]
    fused = ensemble_outputs(ensemble, images, cache=cache)
    cls = fused.cls_probs.data
    reg = fused.reg_offsets.data
    return [postprocess(cls[i], reg[i], ensemble.anchors, ensemble.image_size, config) for i in range(images.shape[0])]


def infer(ensemble: EnsembleSpec, image: np.ndarray, config: InferenceConfig) -> List[Detection]:
    """Detections for a single ``(3, H, W)`` image."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValidationError(f"infer expects one (3, H, W) image, got shape {image.shape}")
    return predict(ensemble, image[None], config)[0]


# ---------------------------------------------------------------------------
# metrics


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    envelope: np.ndarray

    def area(self) -> float:
        """All-point interpolated area under the precision envelope."""
        mrec = np.concatenate([[0.0], self.recall, [1.0]])
        mpre = np.concatenate([[0.0], self.envelope, [0.0]])
        steps = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


GroundTruth = Tuple[np.ndarray, Sequence[int]]


def _ground_truth(item: SceneSample | GroundTruth) -> GroundTruth:
    if isinstance(item, SceneSample):
        return item.gt_array(), item.classes
    boxes, classes = item
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), list(classes)


def precision_recall(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[SceneSample | GroundTruth],
    iou_threshold: float = 0.5,
    class_id: int = 0,
) -> Optional[PRCurve]:
    """PR curve of one class over a dataset; ``None`` when the class has no ground truth.

    Detections are visited by descending score. Each one claims the unmatched
    ground-truth box of its class with the highest IoU if that IoU reaches
    ``iou_threshold`` (true positive); otherwise it is a false positive.
    """
    if len(detections) != len(ground_truth):
        raise ValidationError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    gts: List[List[Box]] = []
    npos = 0
    for item in ground_truth:
        boxes, classes = _ground_truth(item)
        own = [Box.from_array(b) for b, c in zip(boxes, classes) if int(c) == class_id]
        gts.append(own)
        npos += len(own)
    if npos == 0:
        return None

    ranked = [
        (img, pos, det)
        for img, dets in enumerate(detections)
        for pos, det in enumerate(dets)
        if det.class_id == class_id
    ]
    ranked.sort(key=lambda t: (-t[2].score, t[0], t[2].box.x_min, t[2].box.y_min, t[1]))

    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(ranked), dtype=np.float64)
    for rank, (img, _pos, det) in enumerate(ranked):
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gts[img]):
            if matched[img][j]:
                continue
            overlap = iou(det.box, gt)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0 and best_iou >= iou_threshold:
            matched[img][best] = True
            tp[rank] = 1.0

    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
    return PRCurve(recall=recall, precision=precision, envelope=envelope)


def average_precision(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[SceneSample | GroundTruth],
    iou_threshold: float = 0.5,
    class_id: int = 0,
) -> Optional[float]:
    curve = precision_recall(detections, ground_truth, iou_threshold, class_id)
    return None if curve is None else curve.area()


def mean_average_precision(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[SceneSample | GroundTruth],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> Tuple[Dict[int, float], float]:
    """Per-class AP and their mean over classes that have ground truth."""
    per_class: Dict[int, float] = {}
    for c in range(num_classes):
        ap = average_precision(detections, ground_truth, iou_threshold, c)
        if ap is not None:
            per_class[c] = ap
    m_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, m_ap


@dataclass
class EvalReport:
    method: str
    per_class_ap: Dict[int, float]
    map: float
    num_detections: int
    num_ground_truth: int
    seed: int = 0
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def map_pct(self) -> float:
        return self.map * 100.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "per_class_ap_pct": {str(c): ap * 100.0 for c, ap in sorted(self.per_class_ap.items())},
            "map_pct": self.map_pct,
            "num_detections": self.num_detections,
            "num_ground_truth": self.num_ground_truth,
            "seed": self.seed,
            "config": self.config,
        }


def evaluate(
    ensemble: EnsembleSpec,
    dataset: Sequence[SceneSample],
    config: InferenceConfig,
    eval_iou: float = 0.5,
    cache: Optional[ExpertCache] = None,
    seed: int = 0,
    snapshot: Optional[Mapping[str, Any]] = None,
) -> EvalReport:
    if not dataset:
        raise ValidationError("cannot evaluate on an empty dataset")
    detections = predict(ensemble, stack_images(dataset), config, cache=cache)
    per_class, m_ap = mean_average_precision(detections, dataset, ensemble.experts[0].num_classes, eval_iou)
    report = EvalReport(
        method=ensemble.label,
        per_class_ap=per_class,
        map=m_ap,
        num_detections=sum(len(d) for d in detections),
        num_ground_truth=sum(len(s.boxes) for s in dataset),
        seed=int(seed),
        config=dict(snapshot or {}),
    )
    logger.info("%s: mAP %.2f over %d images", ensemble.label, report.map_pct, len(dataset))
    return report


@dataclass
class ExpertMatrix:
    expert_ids: List[str]
    dataset_ids: List[str]
    ap: np.ndarray

    def max_per_dataset(self) -> Dict[str, float]:
        return {d: float(self.ap[:, j].max()) for j, d in enumerate(self.dataset_ids)}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "experts": list(self.expert_ids),
            "datasets": list(self.dataset_ids),
            "ap_pct": [[float(v) * 100.0 for v in row] for row in self.ap],
            "max_ap_pct": {k: v * 100.0 for k, v in self.max_per_dataset().items()},
        }


def expert_matrix(
    experts: Sequence[ExpertModel],
    datasets: Mapping[str, Sequence[SceneSample]],
    config: InferenceConfig,
    eval_iou: float = 0.5,
    caches: Optional[Mapping[str, ExpertCache]] = None,
) -> ExpertMatrix:
    """AP of every expert used alone on every dataset."""
    if not experts or not datasets:
        raise ValidationError("expert_matrix needs at least one expert and one dataset")
    ids = list(datasets)
    values = np.zeros((len(experts), len(ids)), dtype=np.float64)
    for j, name in enumerate(ids):
        samples = datasets[name]
        cache = (caches or {}).get(name) or build_expert_cache(experts, stack_images(samples))
        for i, expert in enumerate(experts):
            single = uniform_ensemble([expert], label=expert.expert_id)
            values[i, j] = evaluate(single, samples, config, eval_iou, cache=cache.subset([i])).map
    return ExpertMatrix(expert_ids=[e.expert_id for e in experts], dataset_ids=ids, ap=values)
