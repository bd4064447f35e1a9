"""Tests for `gated_fusion.scan` utilities."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from conftest import tiny_samples
from gated_fusion.domains import read_png, save_dataset, write_png
from gated_fusion.scan import (
    ExclusionReason,
    ImageItem,
    NoImagesError,
    build_no_images_message,
    build_scan_summary_lines,
    normalize_input_path,
    scan_images,
)


def _write_image(path: Path, size=(16, 16), value: float = 0.5) -> None:
    write_png(path, np.full((3, *size), value, dtype=np.float32))


def test_single_png_is_scanned(tmp_path: Path) -> None:
    f = tmp_path / "one.png"
    _write_image(f)

    items, report = scan_images(f)

    assert len(items) == 1
    assert isinstance(items[0], ImageItem)
    assert items[0].path == f.resolve()
    assert items[0].name == "one.png"
    assert items[0].image.shape == (3, 16, 16)
    assert report.image_count == 1


def test_directory_scan_is_sorted_by_path(tmp_path: Path) -> None:
    for name in ("b.png", "a.png", "c.png"):
        _write_image(tmp_path / name)

    items, _report = scan_images(tmp_path)

    assert [it.name for it in items] == ["a.png", "b.png", "c.png"]


def test_scan_report_counts(tmp_path: Path) -> None:
    input_dir = tmp_path / "input"
    input_dir.mkdir()

    _write_image(input_dir / "good.png")
    _write_image(input_dir / "small.png", size=(8, 8))
    (input_dir / "notes.txt").write_text("hello", encoding="utf-8")
    (input_dir / "empty.png").write_bytes(b"")
    (input_dir / "broken.png").write_bytes(b"not a png")
    (input_dir / "subdir").mkdir()

    items, report = scan_images(input_dir, image_size=(16, 16))

    assert report.input_exists is True
    assert report.recursive is False
    assert report.found_files == 5
    assert report.image_count == 1
    assert [it.name for it in items] == ["good.png"]
    assert report.excluded_counts.get(ExclusionReason.extension, 0) == 1
    assert report.excluded_counts.get(ExclusionReason.zero_byte, 0) == 1
    assert report.excluded_counts.get(ExclusionReason.unreadable, 0) == 1
    assert report.excluded_counts.get(ExclusionReason.size_mismatch, 0) == 1
    assert report.excluded_counts.get(ExclusionReason.directory, 0) == 1
    assert report.excluded_total() == 5


def test_scan_recursive(tmp_path: Path) -> None:
    input_dir = tmp_path / "input"
    nested = input_dir / "nested"
    nested.mkdir(parents=True)
    _write_image(nested / "deep.png")

    flat_items, _ = scan_images(input_dir)
    items, report = scan_images(input_dir, recursive=True)

    assert flat_items == []
    assert report.recursive is True
    assert report.image_count == 1
    assert items[0].path == (nested / "deep.png").resolve()


def test_scan_dataset_manifest(tmp_path: Path) -> None:
    samples = tiny_samples(n=3)
    manifest_path = tmp_path / "data" / "manifest.json"
    save_dataset(samples, manifest_path, spec=None, seed=0)

    by_file, report = scan_images(manifest_path)
    by_dir, _ = scan_images(manifest_path.parent)

    assert report.found_files == 3
    assert [it.name for it in by_file] == ["S1-00000.png", "S1-00001.png", "S1-00002.png"]
    assert [it.path for it in by_dir] == [it.path for it in by_file]
    assert np.array_equal(by_file[0].image, read_png(by_file[0].path))

    _items, mismatch = scan_images(manifest_path, image_size=(32, 32))
    assert mismatch.image_count == 0
    assert mismatch.excluded_counts[ExclusionReason.size_mismatch] == 3


def test_scan_empty_dir(tmp_path: Path) -> None:
    input_dir = tmp_path / "input"
    input_dir.mkdir()

    items, report = scan_images(input_dir)

    assert items == []
    assert report.input_exists is True
    assert report.image_count == 0


def test_normalize_input_path_strips_quotes(tmp_path: Path) -> None:
    input_dir = tmp_path / "input"
    input_dir.mkdir()
    quoted = Path(f'"{input_dir}"')

    normalized = normalize_input_path(quoted)
    assert normalized == input_dir.resolve()


def test_scan_report_suggests_paths(tmp_path: Path) -> None:
    parent = tmp_path / "parent"
    parent.mkdir()
    (parent / "input_real").mkdir()

    missing = parent / "input_reel"
    _items, report = scan_images(missing)

    assert report.input_exists is False
    assert report.suggestions == [(parent / "input_real").resolve()]


def test_summary_and_no_images_message(tmp_path: Path) -> None:
    input_dir = tmp_path / "input"
    input_dir.mkdir()
    _write_image(input_dir / "small.png", size=(8, 8))

    _items, report = scan_images(input_dir, image_size=(16, 16))
    summary = build_scan_summary_lines(report)
    assert "Expected image size: 16x16" in summary
    assert "Excluded breakdown: size_mismatch=1" in summary

    message = build_no_images_message(report)
    assert message[0] == "no images found"
    assert "Try --recursive" in message[-1]
    assert "image size" in message[-1]

    err = NoImagesError(report)
    assert err.exit_code == 2
    assert str(err) == f"no images found in {report.input_root}"
