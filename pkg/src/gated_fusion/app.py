"""Command implementations behind the CLI.

Each ``run_*`` function takes the effective config mapping plus resolved
paths, writes its artifacts and returns an exit code. Seeds for every
stage come from the master ``seed`` through named sub-streams, so running
the pipeline one command at a time reproduces what the experiment runners
do in one process.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

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
from .detector import fine_tune, load_expert, save_expert, train_expert
from .domains import (
    DomainSpec,
    domain_seed,
    generate_domain_dataset,
    load_dataset,
    load_domain_spec,
    make_experiment_domains,
    save_dataset,
)
from .evaluation import evaluate, predict
from .experiments import ExperimentSettings, run_experiment
from .gating import (
    assemble_ensemble,
    load_gating,
    ranking_report,
    retrain_top_k,
    save_gating,
    train_gating,
)
from .scan import NoImagesError, build_scan_summary_lines, scan_images
from .utils import FORMAT_VERSION, derive_seed, dump_json

logger = logging.getLogger(__name__)


def _artifact_header(effective: Mapping[str, Any]) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "seed": int(effective["seed"]),
        "config": format_effective_config(dict(effective)),
    }


def _write_split(spec: DomainSpec, split: str, size: int, out_dir: Path, effective: Mapping[str, Any]) -> Path:
    seed = domain_seed(int(effective["seed"]), spec.domain_id, split)
    samples = generate_domain_dataset(
        spec, size, seed, tuple(effective["image_size"]), workers=int(effective["workers"])
    )
    manifest_path = out_dir / spec.domain_id / split / "manifest.json"
    save_dataset(samples, manifest_path, spec=spec, seed=seed, config=format_effective_config(dict(effective)))
    print(f"Wrote {len(samples)} samples: {manifest_path}")
    return manifest_path


def run_gen_data(
    effective: Mapping[str, Any],
    out_dir: Path,
    domain_spec: Optional[Path] = None,
    samples: Optional[int] = None,
    split: str = "train",
) -> int:
    """Generate one domain from a YAML spec, or every domain of the configured preset.

    Preset layout per domain id: ``<out>/<id>/<split>/manifest.json``.
    Sources get ``train`` and ``eval`` splits, targets ``eval`` and their
    few-shot variants ``train``.
    """
    if domain_spec is not None:
        spec = load_domain_spec(domain_spec)
        _write_split(spec, split, int(samples or effective["source_samples"]), out_dir, effective)
        return 0

    preset = effective.get("preset") or "small5"
    domains = make_experiment_domains(str(preset), int(effective["seed"]))
    written: List[Path] = []
    for spec in domains.sources:
        written.append(_write_split(spec, "train", int(effective["source_samples"]), out_dir, effective))
        written.append(_write_split(spec, "eval", int(effective["eval_samples"]), out_dir, effective))
    for pair in domains.targets:
        written.append(_write_split(pair.target, "eval", int(effective["eval_samples"]), out_dir, effective))
        few = int(effective.get("few_shot_samples") or 0) or pair.few_shot_size
        written.append(_write_split(pair.few_shot, "train", few, out_dir, effective))
    layout = {
        **_artifact_header(effective),
        "preset": preset,
        "sources": [s.domain_id for s in domains.sources],
        "targets": [
            {
                "target": p.target.domain_id,
                "few_shot": p.few_shot.domain_id,
                "matched_source": domains.sources[p.matched_source].domain_id,
            }
            for p in domains.targets
        ],
        "manifests": [p.relative_to(out_dir).as_posix() for p in written],
    }
    dump_json(out_dir / "layout.json", layout)
    print(f"Wrote layout: {out_dir / 'layout.json'}")
    return 0


def run_train_expert(effective: Mapping[str, Any], data: Path, out: Path, expert_id: Optional[str] = None) -> int:
    manifest, samples = load_dataset(data)
    expert_id = expert_id or manifest.domain_id or out.stem
    config = expert_train_config(effective, derive_seed(int(effective["seed"]), "expert", expert_id))
    model = train_expert(
        samples,
        config,
        arch=detector_arch(effective),
        expert_id=expert_id,
        snapshot=format_effective_config(dict(effective)),
    )
    save_expert(model, out)
    print(f"Wrote expert {expert_id}: {out}")
    return 0


def run_fine_tune(
    effective: Mapping[str, Any],
    model_path: Path,
    data: Path,
    out: Path,
    expert_id: Optional[str] = None,
) -> int:
    manifest, samples = load_dataset(data)
    parent = load_expert(model_path)
    config = finetune_train_config(effective, derive_seed(int(effective["seed"]), "finetune", manifest.domain_id))
    tuned = fine_tune(parent, samples, config, expert_id=expert_id, snapshot=format_effective_config(dict(effective)))
    save_expert(tuned, out)
    print(f"Wrote fine-tuned expert {tuned.expert_id} (parent {parent.expert_id}): {out}")
    return 0


def run_train_gating(effective: Mapping[str, Any], model_paths: Sequence[Path], data: Path, out: Path) -> int:
    manifest, samples = load_dataset(data)
    experts = [load_expert(p) for p in model_paths]
    config = gating_train_config(effective, derive_seed(int(effective["seed"]), "gate", manifest.domain_id))
    gate = train_gating(
        experts,
        samples,
        config,
        arch=gating_arch(effective),
        snapshot=format_effective_config(dict(effective)),
        workers=int(effective["workers"]),
    )
    save_gating(gate, out)
    print(f"Wrote gate over {gate.n} experts: {out}")
    return 0


def run_select_topk(
    effective: Mapping[str, Any],
    model_paths: Sequence[Path],
    data: Path,
    out: Path,
    gating_path: Optional[Path] = None,
    k: Optional[int] = None,
    manual_ids: Optional[Sequence[str]] = None,
    report_path: Optional[Path] = None,
) -> int:
    """Rank experts by mean gate weight, keep ``k`` (or ``manual_ids``) and retrain the gate on them."""
    manifest, samples = load_dataset(data)
    experts = [load_expert(p) for p in model_paths]
    master = int(effective["seed"])
    first_stage = load_gating(gating_path) if gating_path is not None else None
    result = retrain_top_k(
        experts,
        samples,
        int(k if k is not None else effective["top_k"]),
        gating_train_config(effective, derive_seed(master, "gate", manifest.domain_id)),
        arch=gating_arch(effective),
        first_stage=first_stage,
        manual_ids=manual_ids,
        topk_seed=derive_seed(master, "gate-topk", manifest.domain_id),
        snapshot=format_effective_config(dict(effective)),
        workers=int(effective["workers"]),
    )
    save_gating(result.ensemble.gating, out)
    report = {
        **_artifact_header(effective),
        **ranking_report(manifest.domain_id, result.ranking, result.selected),
        "manual": bool(manual_ids),
        "gate": out.name,
    }
    report_path = report_path or out.with_suffix(".ranking.json")
    dump_json(report_path, report)
    for rank in result.ranking:
        mark = "*" if rank.index in result.selected else " "
        print(f"{mark} {rank.expert_id:>12s} {rank.mean_weight_pct:6.2f}%")
    print(f"Wrote gate over {len(result.selected)} experts: {out}")
    print(f"Wrote ranking report: {report_path}")
    return 0


def run_infer(
    effective: Mapping[str, Any],
    model_paths: Sequence[Path],
    input_path: Path,
    out: Path,
    gating_path: Optional[Path] = None,
    recursive: bool = False,
    verbose_scan: bool = False,
) -> int:
    ensemble = assemble_ensemble(model_paths, gating_path)
    items, report = scan_images(input_path, recursive=recursive, image_size=ensemble.image_size)
    if not items:
        raise NoImagesError(report)
    if verbose_scan:
        for line in build_scan_summary_lines(report):
            print(line)
    detections = predict(ensemble, np.stack([it.image for it in items]), inference_config(effective))
    payload = {
        **_artifact_header(effective),
        "results": [
            {"image": item.name, "detections": [d.to_dict() for d in dets]}
            for item, dets in zip(items, detections)
        ],
    }
    dump_json(out, payload)
    print(f"Wrote detections for {len(items)} images: {out}")
    return 0


def run_eval(
    effective: Mapping[str, Any],
    model_paths: Sequence[Path],
    data: Path,
    out: Path,
    gating_path: Optional[Path] = None,
) -> int:
    manifest, samples = load_dataset(data)
    label = "gating" if gating_path is not None else ("single" if len(model_paths) == 1 else "average")
    ensemble = assemble_ensemble(model_paths, gating_path, label=label)
    result = evaluate(
        ensemble,
        samples,
        inference_config(effective),
        float(effective["eval_iou"]),
        seed=int(effective["seed"]),
        snapshot=format_effective_config(dict(effective)),
    )
    payload = {
        **_artifact_header(effective),
        "dataset": manifest.domain_id,
        "experts": [e.expert_id for e in ensemble.experts],
        "eval_iou": float(effective["eval_iou"]),
        "report": {k: v for k, v in result.to_dict().items() if k not in {"seed", "config"}},
    }
    dump_json(out, payload)
    print(f"{label} on {manifest.domain_id}: mAP {result.map_pct:.2f}")
    print(f"Wrote evaluation report: {out}")
    return 0


def run_experiment_command(effective: Mapping[str, Any], name: str, out_dir: Path) -> int:
    settings = ExperimentSettings.from_config(effective)
    paths = run_experiment(name, settings, out_dir)
    for path in paths:
        print(f"Wrote {path}")
    if name in {"method_comparison", "incremental"}:
        print(paths[0].read_text(encoding="utf-8").rstrip())
    return 0
