"""Command-line interface for gated_fusion.

``build_parser()`` builds the argparse tree (one subcommand per pipeline
stage, every config key available as a flag on each of them) and
``main()`` merges defaults, preset, config file and explicit flags before
handing off to :mod:`gated_fusion.app`.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import yaml

from .errors import ConfigError, GatedFusionError, exit_code_for

PROG = "gated-fusion"

# one-line help per config key; the default is appended by build_parser
OPTION_HELP: Dict[str, str] = {
    "seed": "Master seed; every stage derives its own stream from it",
    "seeds": "Comma separated master seeds for experiment runs",
    "image_size": "Image size as HEIGHTxWIDTH",
    "workers": "Threads for dataset generation and expert forward passes",
    "expert_epochs": "Training epochs per expert",
    "expert_batch_size": "Minibatch size for expert training and fine-tuning",
    "expert_learning_rate": "SGD learning rate for expert training",
    "expert_momentum": "SGD momentum for expert training and fine-tuning",
    "gating_epochs": "Training epochs for the gating network",
    "gating_batch_size": "Minibatch size for gate training",
    "gating_learning_rate": "SGD learning rate for the gating network",
    "gating_momentum": "SGD momentum for the gating network",
    "finetune_epochs": "Epochs for the fine-tuning baseline",
    "finetune_learning_rate": "SGD learning rate for the fine-tuning baseline",
    "focal_alpha": "Focal loss positive-class weight",
    "focal_gamma": "Focal loss focusing exponent",
    "pos_iou": "Anchor IoU at or above which an anchor is positive",
    "neg_iou": "Anchor IoU below which an anchor is negative",
    "max_grad_norm": "Global gradient norm clip (0 disables)",
    "anchor_scales": "Comma separated anchor sizes in pixels",
    "anchor_ratios": "Comma separated anchor height/width ratios",
    "backbone_channels": "Comma separated conv widths of the expert backbone",
    "head_channels": "Hidden width of the classification and regression heads",
    "gating_channels": "Comma separated conv widths of the gating backbone",
    "score_threshold": "Keep detections scoring strictly above this",
    "nms_iou": "IoU at which NMS suppresses a lower-scored box",
    "max_detections": "Maximum detections kept per image",
    "eval_iou": "IoU needed for a detection to match ground truth",
    "top_k": "Number of experts kept by top-k selection",
    "model_counts": "Comma separated expert counts for the incremental experiment",
    "source_samples": "Training samples generated per source domain",
    "eval_samples": "Held-out samples generated per evaluation split",
    "few_shot_samples": "Few-shot target samples (0 keeps the preset layout size)",
}


def _format_default(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _option_type(key: str) -> Callable[[str], Any]:
    from .config import coerce_value

    def parse(text: str) -> Any:
        try:
            return coerce_value(key, text)
        except ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    parse.__name__ = key
    return parse


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    from .presets import DEFAULTS, PRESET_NAMES
    from .utils import format_image_size

    group = parser.add_argument_group("configuration")
    group.add_argument(
        "--config",
        type=Path,
        help="YAML config file (values override preset defaults, CLI overrides config)",
    )
    group.add_argument(
        "--preset",
        type=str,
        choices=PRESET_NAMES,
        help="Experiment layout and matching defaults. Explicit flags override preset values.",
    )
    group.add_argument(
        "--print-config",
        action="store_true",
        help="Print the effective config after applying preset/config/CLI overrides.",
    )
    group.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log progress (-v) or debug detail (-vv)",
    )
    for key, text in OPTION_HELP.items():
        default = DEFAULTS[key]
        shown = format_image_size(default) if key == "image_size" else _format_default(default)
        group.add_argument(
            f"--{key.replace('_', '-')}",
            dest=key,
            type=_option_type(key),
            default=None,
            metavar=key.upper(),
            help=f"{text} (default: {shown})",
        )


def build_parser() -> argparse.ArgumentParser:
    from .experiments import EXPERIMENTS

    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Gated fusion of frozen object-detector experts on synthetic multi-domain data.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def command(name: str, text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=text, description=text)
        _add_config_options(p)
        return p

    p = command("gen-data", "Generate synthetic datasets for a preset layout or one domain spec.")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--domain-spec", type=Path, help="YAML DomainSpec; generates only that domain (default: whole preset)")
    p.add_argument("--samples", type=int, help="Sample count with --domain-spec (default: --source-samples)")
    p.add_argument("--split", choices=["train", "eval"], default="train", help="Split name with --domain-spec (default: %(default)s)")

    p = command("train-expert", "Train one expert detector on a dataset.")
    p.add_argument("--data", type=Path, required=True, help="Dataset manifest.json")
    p.add_argument("--out", type=Path, required=True, help="Output model file")
    p.add_argument("--expert-id", help="Expert id (default: the dataset's domain id)")

    p = command("fine-tune", "Fine-tune a trained expert on few target samples.")
    p.add_argument("--model", type=Path, required=True, help="Expert model file to start from")
    p.add_argument("--data", type=Path, required=True, help="Few-shot dataset manifest.json")
    p.add_argument("--out", type=Path, required=True, help="Output model file")
    p.add_argument("--expert-id", help="Id of the tuned model (default: <parent>-ft)")

    p = command("train-gating", "Train a gating network over frozen experts.")
    p.add_argument("--models", type=Path, nargs="+", required=True, help="Expert model files, in gate output order")
    p.add_argument("--data", type=Path, required=True, help="Few-shot dataset manifest.json")
    p.add_argument("--out", type=Path, required=True, help="Output gating model file")

    p = command("select-topk", "Rank experts by mean gate weight, keep k and retrain the gate.")
    p.add_argument("--models", type=Path, nargs="+", required=True, help="Expert model files, in gate output order")
    p.add_argument("--data", type=Path, required=True, help="Few-shot dataset manifest.json")
    p.add_argument("--out", type=Path, required=True, help="Output gating model file for the kept experts")
    p.add_argument("--gating", type=Path, help="Gate over all experts to rank with (default: train one)")
    p.add_argument("--k", type=int, help="Experts to keep (default: --top-k)")
    p.add_argument("--manual-ids", help="Comma separated expert ids to keep instead of the automatic pick")
    p.add_argument("--report", type=Path, help="Ranking report path (default: <out>.ranking.json)")

    p = command("infer", "Run an ensemble on images and write detections as JSON.")
    p.add_argument("--models", type=Path, nargs="+", required=True, help="Expert model files")
    p.add_argument("--gating", type=Path, help="Gating model file (default: uniform average)")
    p.add_argument("--input", type=Path, required=True, help="PNG file, directory of PNGs or dataset manifest.json")
    p.add_argument("--out", type=Path, required=True, help="Output JSON file")
    p.add_argument("--recursive", action="store_true", help="Scan subdirectories of --input")
    p.add_argument("--verbose-scan", action="store_true", help="Print the input scan summary")

    p = command("eval", "Evaluate an ensemble's mAP on a dataset.")
    p.add_argument("--models", type=Path, nargs="+", required=True, help="Expert model files")
    p.add_argument("--gating", type=Path, help="Gating model file (default: uniform average)")
    p.add_argument("--data", type=Path, required=True, help="Evaluation dataset manifest.json")
    p.add_argument("--out", type=Path, required=True, help="Output report JSON")

    p = command("experiment", "Run one of the comparison experiments on a synthetic preset.")
    p.add_argument("name", choices=EXPERIMENTS, help="Experiment to run")
    p.add_argument("--out-dir", type=Path, default=Path("./results"), help="Output directory (default: %(default)s)")

    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def resolve_config(args: argparse.Namespace, argv_tokens: List[str]) -> Dict[str, Any]:
    """Defaults, then preset, then config file, then flags given on the command line."""
    from .config import build_config_defaults, build_effective_config, load_yaml_config
    from .presets import OPTION_KEYS, detect_provided_options

    provided = detect_provided_options(argv_tokens)
    config_values: Dict[str, Any] = load_yaml_config(args.config) if args.config else {}

    preset_name = None
    if args.preset:
        preset_name = args.preset
    elif config_values.get("preset"):
        preset_name = str(config_values["preset"])

    cli_values = {k: getattr(args, k) for k in OPTION_KEYS if getattr(args, k, None) is not None}
    return build_effective_config(
        build_config_defaults(), preset_name, config_values, cli_values, provided | set(cli_values)
    )


def _dispatch(args: argparse.Namespace, effective: Dict[str, Any]) -> int:
    from . import app

    if args.command == "gen-data":
        return app.run_gen_data(effective, args.out, args.domain_spec, args.samples, args.split)
    if args.command == "train-expert":
        return app.run_train_expert(effective, args.data, args.out, args.expert_id)
    if args.command == "fine-tune":
        return app.run_fine_tune(effective, args.model, args.data, args.out, args.expert_id)
    if args.command == "train-gating":
        return app.run_train_gating(effective, args.models, args.data, args.out)
    if args.command == "select-topk":
        manual = [x.strip() for x in args.manual_ids.split(",") if x.strip()] if args.manual_ids else None
        return app.run_select_topk(
            effective, args.models, args.data, args.out, args.gating, args.k, manual, args.report
        )
    if args.command == "infer":
        return app.run_infer(
            effective, args.models, args.input, args.out, args.gating, args.recursive, args.verbose_scan
        )
    if args.command == "eval":
        return app.run_eval(effective, args.models, args.data, args.out, args.gating)
    if args.command == "experiment":
        return app.run_experiment_command(effective, args.name, args.out_dir)
    raise ConfigError(f"unknown command {args.command!r}")


def report_error(exc: BaseException) -> int:
    """Print one ``gated-fusion: error[Name]: message`` line and return the exit code."""
    message = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"{PROG}: error[{exc.__class__.__name__}]: {message}", file=sys.stderr)
    return exit_code_for(exc)


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entry point; returns the process exit code."""
    parser = build_parser()
    argv_tokens = list(argv) if argv is not None else sys.argv[1:]
    args = parser.parse_args(argv_tokens)
    _configure_logging(int(args.verbose))

    from .config import format_effective_config
    from .scan import NoImagesError, build_no_images_message

    try:
        effective = resolve_config(args, argv_tokens)
        if args.print_config:
            print(yaml.safe_dump(format_effective_config(effective), sort_keys=False).strip())
        return _dispatch(args, effective)
    except NoImagesError as exc:
        for line in build_no_images_message(exc.report)[1:]:
            print(line)
        return report_error(exc)
    except (GatedFusionError, OSError, ValueError, ArithmeticError) as exc:
        return report_error(exc)


if __name__ == "__main__":
    raise SystemExit(main())
