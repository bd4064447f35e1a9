"""Experiment runners that regenerate the comparison tables on synthetic presets.

Every runner works seed by seed. For one master seed a :class:`SeedWorld`
builds the preset's domains, trains one expert per source domain and
generates the few-shot and evaluation sets; frozen expert outputs on those
sets are cached once and shared by every method. Table cells are medians
over the seeds, in percentage points.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import (
    detector_arch,
    expert_train_config,
    finetune_train_config,
    format_effective_config,
    gating_arch,
    gating_train_config,
    inference_config,
)
from .detector import DetectorConfig, ExpertModel, TrainConfig, fine_tune, stack_images, train_expert
from .domains import ExperimentDomains, SceneSample, domain_seed, generate_domain_dataset, make_experiment_domains
from .errors import ValidationError
from .evaluation import InferenceConfig, evaluate, expert_matrix
from .gating import (
    EnsembleSpec,
    ExpertCache,
    GatingArch,
    GatingModel,
    build_expert_cache,
    mean_gate_weights,
    ranking_report,
    retrain_top_k,
    select_top_k,
    train_gating,
    uniform_ensemble,
)
from .utils import FORMAT_VERSION, derive_seed, dump_json

logger = logging.getLogger(__name__)

METHOD_COLUMNS = ("max_single", "fine_tune", "average", "gating_all", "gating_topk")
EXPERIMENTS = ("method_comparison", "incremental", "weight_ranking", "expert_matrix")


@dataclass(frozen=True)
class ExperimentSettings:
    preset: str
    seeds: Tuple[int, ...]
    arch: DetectorConfig
    gate_arch: GatingArch
    inference: InferenceConfig
    effective: Mapping[str, Any] = field(repr=False)

    @classmethod
    def from_config(cls, effective: Mapping[str, Any]) -> "ExperimentSettings":
        preset = effective.get("preset") or "small5"
        seeds = tuple(int(s) for s in effective["seeds"])
        if not seeds:
            raise ValidationError("at least one seed is required")
        return cls(
            preset=str(preset),
            seeds=seeds,
            arch=detector_arch(effective),
            gate_arch=gating_arch(effective),
            inference=inference_config(effective),
            effective=dict(effective),
        )

    @property
    def eval_iou(self) -> float:
        return float(self.effective["eval_iou"])

    @property
    def workers(self) -> int:
        return int(self.effective["workers"])

    def snapshot(self) -> Dict[str, Any]:
        return format_effective_config(dict(self.effective, preset=self.preset))


class SeedWorld:
    """Lazily built domains, experts, datasets and expert caches for one master seed."""

    def __init__(self, settings: ExperimentSettings, seed: int) -> None:
        self.settings = settings
        self.seed = int(seed)
        self.domains: ExperimentDomains = make_experiment_domains(settings.preset, self.seed)
        self._experts: Optional[List[ExpertModel]] = None
        self._datasets: Dict[Tuple[str, str], List[SceneSample]] = {}
        self._caches: Dict[Tuple[str, str], ExpertCache] = {}
        self._gates: Dict[str, GatingModel] = {}

    @property
    def effective(self) -> Mapping[str, Any]:
        return self.settings.effective

    def dataset(self, spec_id: str, split: str) -> List[SceneSample]:
        key = (spec_id, split)
        if key not in self._datasets:
            spec, size = self._spec_and_size(spec_id, split)
            self._datasets[key] = generate_domain_dataset(
                spec,
                size,
                domain_seed(self.seed, spec_id, split),
                self.settings.arch.image_size,
                workers=self.settings.workers,
            )
        return self._datasets[key]

    def _spec_and_size(self, spec_id: str, split: str):
        for spec in self.domains.sources:
            if spec.domain_id == spec_id:
                size = self.effective["source_samples"] if split == "train" else self.effective["eval_samples"]
                return spec, int(size)
        for pair in self.domains.targets:
            if pair.few_shot.domain_id == spec_id:
                override = int(self.effective.get("few_shot_samples") or 0)
                return pair.few_shot, override or pair.few_shot_size
            if pair.target.domain_id == spec_id:
                return pair.target, int(self.effective["eval_samples"])
        raise ValidationError(f"preset {self.settings.preset} has no domain {spec_id!r}")

    @property
    def experts(self) -> List[ExpertModel]:
        if self._experts is None:
            experts = []
            for spec in self.domains.sources:
                config = expert_train_config(self.effective, derive_seed(self.seed, "expert", spec.domain_id))
                experts.append(
                    train_expert(
                        self.dataset(spec.domain_id, "train"),
                        config,
                        arch=self.settings.arch,
                        expert_id=spec.domain_id,
                        snapshot=self.settings.snapshot(),
                    )
                )
            self._experts = experts
        return self._experts

    def cache(self, spec_id: str, split: str) -> ExpertCache:
        key = (spec_id, split)
        if key not in self._caches:
            images = stack_images(self.dataset(spec_id, split))
            self._caches[key] = build_expert_cache(self.experts, images, workers=self.settings.workers)
        return self._caches[key]

    def gate_config(self, target_id: str) -> TrainConfig:
        return gating_train_config(self.effective, derive_seed(self.seed, "gate", target_id))

    def gate_all(self, target_id: str, few_shot_id: str) -> GatingModel:
        """Gate over every expert trained on the target's few-shot set (memoised)."""
        if target_id not in self._gates:
            self._gates[target_id] = train_gating(
                self.experts,
                self.dataset(few_shot_id, "train"),
                self.gate_config(target_id),
                arch=self.settings.gate_arch,
                cache=self.cache(few_shot_id, "train"),
                snapshot=self.settings.snapshot(),
            )
        return self._gates[target_id]

    def evaluate_on(self, ensemble: EnsembleSpec, target_id: str, indices: Optional[Sequence[int]] = None) -> float:
        cache = self.cache(target_id, "eval")
        if indices is not None:
            cache = cache.subset(indices)
        report = evaluate(
            ensemble,
            self.dataset(target_id, "eval"),
            self.settings.inference,
            self.settings.eval_iou,
            cache=cache,
            seed=self.seed,
        )
        return report.map


# ---------------------------------------------------------------------------
# tables


@dataclass
class ResultTable:
    """Rows are targets, columns methods (or model counts); cells are median AP in percent."""

    name: str
    columns: List[str]
    rows: List[Tuple[str, List[float]]]
    per_seed: Dict[int, Dict[str, Dict[str, float]]] = field(default_factory=dict)

    def cell(self, target: str, column: str) -> float:
        j = self.columns.index(column)
        for row_target, values in self.rows:
            if row_target == target:
                return values[j]
        raise KeyError(target)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["target", *self.columns])
        for target, values in self.rows:
            writer.writerow([target, *(f"{v:.4f}" for v in values)])
        return buf.getvalue()


def _median_table(
    name: str,
    columns: Sequence[str],
    targets: Sequence[str],
    per_seed: Dict[int, Dict[str, Dict[str, float]]],
) -> ResultTable:
    rows = []
    for target in targets:
        rows.append(
            (target, [float(np.median([per_seed[s][target][c] for s in sorted(per_seed)])) for c in columns])
        )
    return ResultTable(name=name, columns=list(columns), rows=rows, per_seed=per_seed)


def _target_ids(world: SeedWorld) -> List[str]:
    return [pair.target.domain_id for pair in world.domains.targets]


def run_method_comparison(settings: ExperimentSettings, worlds: Optional[Dict[int, SeedWorld]] = None) -> ResultTable:
    """Best single expert, fine-tuning, uniform average, gating over all and gating over top-k."""
    worlds = worlds if worlds is not None else {}
    per_seed: Dict[int, Dict[str, Dict[str, float]]] = {}
    targets: List[str] = []
    k = int(settings.effective["top_k"])
    for seed in settings.seeds:
        world = worlds.setdefault(seed, SeedWorld(settings, seed))
        experts = world.experts
        if not 1 <= k <= len(experts):
            raise ValidationError(f"top_k must be in [1, {len(experts)}], got {k}")
        targets = _target_ids(world)
        per_seed[seed] = {}
        for pair in world.domains.targets:
            tid, fid = pair.target.domain_id, pair.few_shot.domain_id
            few_shot = world.dataset(fid, "train")
            singles = [world.evaluate_on(uniform_ensemble([e]), tid, [i]) for i, e in enumerate(experts)]

            few_shot_cache = world.cache(fid, "train")
            few_shot_ap = [
                evaluate(
                    uniform_ensemble([e]), few_shot, settings.inference, settings.eval_iou, cache=few_shot_cache.subset([i])
                ).map
                for i, e in enumerate(experts)
            ]
            parent = experts[int(np.argmax(few_shot_ap))]
            tuned = fine_tune(
                parent,
                few_shot,
                finetune_train_config(settings.effective, derive_seed(seed, "finetune", tid)),
                expert_id=f"{parent.expert_id}-ft-{tid}",
            )
            fine_tuned = evaluate(
                uniform_ensemble([tuned], label="fine_tune"),
                world.dataset(tid, "eval"),
                settings.inference,
                settings.eval_iou,
            ).map

            average = world.evaluate_on(uniform_ensemble(experts), tid)
            gate = world.gate_all(tid, fid)
            gating_all = world.evaluate_on(EnsembleSpec(tuple(experts), gate, "gating_all"), tid)
            top = retrain_top_k(
                experts,
                few_shot,
                k,
                world.gate_config(tid),
                arch=settings.gate_arch,
                cache=few_shot_cache,
                first_stage=gate,
                topk_seed=derive_seed(seed, "gate-topk", tid),
            )
            gating_topk = world.evaluate_on(top.ensemble, tid, top.selected)

            cells = {
                "max_single": max(singles),
                "fine_tune": fine_tuned,
                "average": average,
                "gating_all": gating_all,
                "gating_topk": gating_topk,
            }
            per_seed[seed][tid] = {c: v * 100.0 for c, v in cells.items()}
            logger.info("seed %d %s: %s", seed, tid, {c: round(v * 100.0, 2) for c, v in cells.items()})
    return _median_table("method_comparison", METHOD_COLUMNS, targets, per_seed)


def _check_model_counts(counts: Sequence[int], n: int) -> List[int]:
    counts = [int(m) for m in counts]
    if not counts:
        raise ValidationError("model_counts must not be empty")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValidationError(f"model_counts must be strictly increasing, got {counts}")
    if counts[0] < 1 or counts[-1] > n:
        raise ValidationError(f"model_counts must lie in [1, {n}], got {counts}")
    return counts


def run_incremental(
    settings: ExperimentSettings,
    model_counts: Optional[Sequence[int]] = None,
    worlds: Optional[Dict[int, SeedWorld]] = None,
) -> ResultTable:
    """Gate over the expert prefixes S1..Sm for every m in ``model_counts``."""
    worlds = worlds if worlds is not None else {}
    counts_in = model_counts if model_counts is not None else settings.effective["model_counts"]
    per_seed: Dict[int, Dict[str, Dict[str, float]]] = {}
    targets: List[str] = []
    columns: List[str] = []
    for seed in settings.seeds:
        world = worlds.setdefault(seed, SeedWorld(settings, seed))
        experts = world.experts
        counts = _check_model_counts(counts_in, len(experts))
        columns = [str(m) for m in counts]
        targets = _target_ids(world)
        per_seed[seed] = {}
        for pair in world.domains.targets:
            tid, fid = pair.target.domain_id, pair.few_shot.domain_id
            row: Dict[str, float] = {}
            for m in counts:
                if m == len(experts):
                    gate = world.gate_all(tid, fid)
                else:
                    prefix = list(range(m))
                    gate = train_gating(
                        experts[:m],
                        world.dataset(fid, "train"),
                        world.gate_config(tid),
                        arch=settings.gate_arch,
                        cache=world.cache(fid, "train").subset(prefix),
                    )
                ensemble = EnsembleSpec(tuple(experts[:m]), gate, f"gating_{m}")
                indices = None if m == len(experts) else list(range(m))
                row[str(m)] = world.evaluate_on(ensemble, tid, indices) * 100.0
            per_seed[seed][tid] = row
            logger.info("seed %d %s incremental: %s", seed, tid, {c: round(v, 2) for c, v in row.items()})
    return _median_table("incremental", columns, targets, per_seed)


def run_weight_ranking(
    settings: ExperimentSettings,
    k: Optional[int] = None,
    worlds: Optional[Dict[int, SeedWorld]] = None,
) -> Dict[str, Any]:
    """Mean gate weight per expert on each target's few-shot data, plus the top-k pick."""
    worlds = worlds if worlds is not None else {}
    k = int(k if k is not None else settings.effective["top_k"])
    reports = []
    for seed in settings.seeds:
        world = worlds.setdefault(seed, SeedWorld(settings, seed))
        if not 1 <= k <= len(world.experts):
            raise ValidationError(f"k must be in [1, {len(world.experts)}], got {k}")
        for pair in world.domains.targets:
            tid, fid = pair.target.domain_id, pair.few_shot.domain_id
            gate = world.gate_all(tid, fid)
            ranking = mean_gate_weights(gate, stack_images(world.dataset(fid, "train")))
            selected = select_top_k(ranking, k)
            report = ranking_report(tid, ranking, selected)
            report["seed"] = seed
            report["matched_source"] = world.domains.sources[pair.matched_source].domain_id
            reports.append(report)
    return {
        "format_version": FORMAT_VERSION,
        "experiment": "weight_ranking",
        "preset": settings.preset,
        "seeds": list(settings.seeds),
        "k": k,
        "config": settings.snapshot(),
        "reports": reports,
    }


def run_expert_matrix(settings: ExperimentSettings, worlds: Optional[Dict[int, SeedWorld]] = None) -> Dict[str, Any]:
    """AP of each expert alone on every target and on held-out data of every source domain."""
    worlds = worlds if worlds is not None else {}
    grids = []
    expert_ids: List[str] = []
    dataset_ids: List[str] = []
    for seed in settings.seeds:
        world = worlds.setdefault(seed, SeedWorld(settings, seed))
        names = [(p.target.domain_id, "eval") for p in world.domains.targets]
        names += [(s.domain_id, "eval") for s in world.domains.sources]
        datasets = {name: world.dataset(name, split) for name, split in names}
        caches = {name: world.cache(name, split) for name, split in names}
        matrix = expert_matrix(world.experts, datasets, settings.inference, settings.eval_iou, caches=caches)
        grids.append(matrix.ap)
        expert_ids, dataset_ids = matrix.expert_ids, matrix.dataset_ids
    median = np.median(np.stack(grids), axis=0)
    return {
        "format_version": FORMAT_VERSION,
        "experiment": "expert_matrix",
        "preset": settings.preset,
        "seeds": list(settings.seeds),
        "config": settings.snapshot(),
        "experts": expert_ids,
        "datasets": dataset_ids,
        "ap_pct": [[float(v) * 100.0 for v in row] for row in median],
        "max_ap_pct": {d: float(median[:, j].max()) * 100.0 for j, d in enumerate(dataset_ids)},
        "per_seed_ap_pct": {
            str(s): [[float(v) * 100.0 for v in row] for row in g] for s, g in zip(settings.seeds, grids)
        },
    }


# ---------------------------------------------------------------------------
# writers


def write_table(table: ResultTable, out_dir: Path, settings: ExperimentSettings) -> Tuple[Path, Path]:
    """``<name>.csv`` plus a ``<name>.meta.json`` sidecar with seeds and config."""
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{table.name}.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(table.to_csv())
    meta = {
        "format_version": FORMAT_VERSION,
        "experiment": table.name,
        "preset": settings.preset,
        "seeds": list(settings.seeds),
        "config": settings.snapshot(),
        "per_seed": {str(s): cells for s, cells in sorted(table.per_seed.items())},
    }
    meta_path = dump_json(out_dir / f"{table.name}.meta.json", meta)
    logger.info("wrote %s and %s", csv_path, meta_path)
    return csv_path, meta_path


def run_experiment(name: str, settings: ExperimentSettings, out_dir: Path) -> List[Path]:
    if name not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment {name!r} (choose from {', '.join(EXPERIMENTS)})")
    runners: Dict[str, Callable[[], Any]] = {
        "method_comparison": lambda: run_method_comparison(settings),
        "incremental": lambda: run_incremental(settings),
        "weight_ranking": lambda: run_weight_ranking(settings),
        "expert_matrix": lambda: run_expert_matrix(settings),
    }
    result = runners[name]()
    if isinstance(result, ResultTable):
        return list(write_table(result, out_dir, settings))
    return [dump_json(out_dir / f"{name}.json", result)]
