"""End-to-end CLI run: gen-data -> train-expert -> train-gating -> select-topk -> infer -> eval.

Runs in-process through `cli.main` on 16x16 images with one-epoch
training so the whole chain stays fast.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from gated_fusion import cli
from gated_fusion.detector import load_expert
from gated_fusion.gating import load_gating

TINY_FLAGS = [
    "--image-size",
    "16x16",
    "--backbone-channels",
    "4",
    "--head-channels",
    "4",
    "--anchor-scales",
    "6",
    "--gating-channels",
    "4,4",
    "--expert-epochs",
    "1",
    "--expert-batch-size",
    "4",
    "--gating-epochs",
    "1",
    "--gating-batch-size",
    "4",
    "--finetune-epochs",
    "1",
    "--seed",
    "5",
]

SPECS = {
    "S1": (0.1, 0.6),
    "S2": (0.45, 0.95),
    "T1": (0.12, 0.62),
}


def _run(*args: str) -> None:
    assert cli.main([*args, *TINY_FLAGS]) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("e2e")
    for domain_id, (background, obj) in SPECS.items():
        spec = root / f"{domain_id}.yml"
        spec.write_text(
            f"domain_id: {domain_id}\nbackground_hue: {background}\nobject_hue: {obj}\n"
            "object_count_range: [1, 2]\nobject_scale_range: [4, 7]\n",
            encoding="utf-8",
        )
        _run("gen-data", "--domain-spec", str(spec), "--samples", "6", "--out", str(root / "data"))
        if domain_id == "T1":
            _run("gen-data", "--domain-spec", str(spec), "--samples", "4", "--split", "eval", "--out", str(root / "data"))

    models = root / "models"
    for expert_id in ("S1", "S2"):
        _run("train-expert", "--data", str(root / "data" / expert_id / "train" / "manifest.json"), "--out", str(models / f"{expert_id}.gfm"))
    return root


def _manifest(root: Path, domain_id: str, split: str) -> str:
    return str(root / "data" / domain_id / split / "manifest.json")


def _models(root: Path) -> list[str]:
    return [str(root / "models" / "S1.gfm"), str(root / "models" / "S2.gfm")]


def test_gen_data_and_experts(pipeline: Path) -> None:
    manifest = json.loads(Path(_manifest(pipeline, "S1", "train")).read_text(encoding="utf-8"))
    assert len(manifest["records"]) == 6
    assert manifest["image_size"] == [16, 16]
    expert = load_expert(pipeline / "models" / "S1.gfm")
    assert expert.expert_id == "S1"
    assert expert.arch.image_size == (16, 16)


def test_train_expert_is_byte_identical_on_rerun(pipeline: Path, tmp_path: Path) -> None:
    again = tmp_path / "S1.gfm"
    _run("train-expert", "--data", _manifest(pipeline, "S1", "train"), "--out", str(again))
    assert again.read_bytes() == (pipeline / "models" / "S1.gfm").read_bytes()


def test_gating_topk_infer_and_eval(pipeline: Path, tmp_path: Path, capsys) -> None:
    gate = tmp_path / "gate.gfm"
    _run("train-gating", "--models", *_models(pipeline), "--data", _manifest(pipeline, "T1", "train"), "--out", str(gate))
    assert load_gating(gate).expert_ids == ("S1", "S2")

    top = tmp_path / "gate_top1.gfm"
    _run(
        "select-topk",
        "--models",
        *_models(pipeline),
        "--data",
        _manifest(pipeline, "T1", "train"),
        "--gating",
        str(gate),
        "--k",
        "1",
        "--out",
        str(top),
    )
    report = json.loads((tmp_path / "gate_top1.ranking.json").read_text(encoding="utf-8"))
    assert report["target"] == "T1"
    assert len(report["ranking"]) == 2
    assert report["manual"] is False
    (kept,) = report["selected"]
    assert load_gating(top).expert_ids == (kept,)

    detections = tmp_path / "detections.json"
    _run(
        "infer",
        "--models",
        *_models(pipeline),
        "--gating",
        str(gate),
        "--input",
        _manifest(pipeline, "T1", "eval"),
        "--out",
        str(detections),
        "--verbose-scan",
    )
    payload = json.loads(detections.read_text(encoding="utf-8"))
    assert [r["image"] for r in payload["results"]] == [f"T1-{i:05d}.png" for i in range(4)]
    assert payload["seed"] == 5
    assert "Files found: 4, excluded: 0, images: 4" in capsys.readouterr().out

    report_path = tmp_path / "eval.json"
    _run("eval", "--models", *_models(pipeline), "--gating", str(gate), "--data", _manifest(pipeline, "T1", "eval"), "--out", str(report_path))
    result = json.loads(report_path.read_text(encoding="utf-8"))
    assert result["dataset"] == "T1"
    assert result["experts"] == ["S1", "S2"]
    assert result["report"]["method"] == "gating"
    assert 0.0 <= result["report"]["map_pct"] <= 100.0


def test_fine_tune_command(pipeline: Path, tmp_path: Path, capsys) -> None:
    out = tmp_path / "S1-ft.gfm"
    _run("fine-tune", "--model", str(pipeline / "models" / "S1.gfm"), "--data", _manifest(pipeline, "T1", "train"), "--out", str(out))
    tuned = load_expert(out)
    assert tuned.expert_id == "S1-ft"
    assert tuned.parent_id == "S1"
    assert "parent S1" in capsys.readouterr().out


def test_infer_on_empty_directory_reports_no_images(pipeline: Path, tmp_path: Path, capsys) -> None:
    empty = tmp_path / "empty"
    empty.mkdir()
    rc = cli.main(["infer", "--models", *_models(pipeline), "--input", str(empty), "--out", str(tmp_path / "d.json"), *TINY_FLAGS])
    assert rc == 2
    captured = capsys.readouterr()
    assert "Try --recursive" in captured.out
    assert captured.err.startswith("gated-fusion: error[NoImagesError]: no images found in")
    assert not (tmp_path / "d.json").exists()
