"""Collect input images for inference.

An input path may be a single PNG, a directory of PNGs (flat or recursive)
or a dataset ``manifest.json``. Every candidate is read and checked
against the ensemble's image size; rejects are counted by reason so the
CLI can explain an empty result.
"""

from __future__ import annotations

import difflib
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .domains import load_dataset, read_png
from .errors import ArtifactIOError, GatedFusionError

logger = logging.getLogger(__name__)

IMAGE_EXTS = {".png"}
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ImageItem:
    path: Path
    image: np.ndarray

    @property
    def name(self) -> str:
        return self.path.name


class ExclusionReason(str, Enum):
    directory = "directory"
    not_file = "not_file"
    extension = "extension"
    zero_byte = "zero_byte"
    unreadable = "unreadable"
    size_mismatch = "size_mismatch"


@dataclass(frozen=True)
class ScanReport:
    input_root: Path
    input_exists: bool
    recursive: bool
    image_size: Optional[Tuple[int, int]]
    found_files: int
    excluded_counts: Dict[ExclusionReason, int]
    image_count: int
    suggestions: List[Path]

    def excluded_total(self) -> int:
        return sum(self.excluded_counts.values())


def normalize_input_path(path: Path) -> Path:
    text = str(path).strip()
    if (text.startswith("\"") and text.endswith("\"")) or (text.startswith("'") and text.endswith("'")):
        text = text[1:-1]
    p = Path(text).expanduser()
    try:
        return p.resolve(strict=False)
    except OSError:
        return p


def _nearest_existing_parent(path: Path) -> Path | None:
    cur = path
    while True:
        if cur.exists():
            return cur
        if cur.parent == cur:
            return None
        cur = cur.parent


def suggest_input_paths(path: Path, limit: int = 5) -> List[Path]:
    parent = _nearest_existing_parent(path)
    if parent is None or not parent.is_dir():
        return []
    try:
        names = sorted(p.name for p in parent.iterdir())
    except OSError:
        return []
    return [parent / name for name in difflib.get_close_matches(path.name, names, n=limit)]


def _scan_paths(
    paths: Iterable[Path],
    image_size: Optional[Tuple[int, int]],
) -> Tuple[List[ImageItem], Counter[ExclusionReason], int]:
    items: List[ImageItem] = []
    excluded: Counter[ExclusionReason] = Counter()
    found_files = 0

    for p in sorted(paths):
        try:
            if p.is_dir():
                excluded[ExclusionReason.directory] += 1
                continue
            if not p.is_file():
                excluded[ExclusionReason.not_file] += 1
                continue
        except OSError:
            excluded[ExclusionReason.unreadable] += 1
            continue

        found_files += 1
        if p.suffix.lower() not in IMAGE_EXTS:
            excluded[ExclusionReason.extension] += 1
            continue
        try:
            if p.stat().st_size == 0:
                excluded[ExclusionReason.zero_byte] += 1
                continue
            image = read_png(p)
        except (OSError, ArtifactIOError) as exc:
            logger.warning("skipping %s: %s", p, exc)
            excluded[ExclusionReason.unreadable] += 1
            continue

        if image_size is not None and image.shape[1:] != tuple(image_size):
            logger.warning("skipping %s: size %dx%d, expected %dx%d", p, *image.shape[1:], *image_size)
            excluded[ExclusionReason.size_mismatch] += 1
            continue
        items.append(ImageItem(path=p, image=image))

    return items, excluded, found_files


def _scan_manifest(
    manifest_path: Path,
    image_size: Optional[Tuple[int, int]],
) -> Tuple[List[ImageItem], Counter[ExclusionReason], int]:
    manifest, samples = load_dataset(manifest_path)
    root = manifest_path.parent
    excluded: Counter[ExclusionReason] = Counter()
    items = []
    for sample, record in zip(samples, manifest.records):
        if image_size is not None and sample.image_size != tuple(image_size):
            excluded[ExclusionReason.size_mismatch] += 1
            continue
        items.append(ImageItem(path=root / record["image"], image=sample.image))
    return items, excluded, len(samples)


def scan_images(
    input_path: Path,
    recursive: bool = False,
    image_size: Optional[Tuple[int, int]] = None,
) -> Tuple[List[ImageItem], ScanReport]:
    """Images under ``input_path`` in path order, plus a report of what was skipped."""
    normalized = normalize_input_path(input_path)
    if not normalized.exists():
        report = ScanReport(
            input_root=normalized,
            input_exists=False,
            recursive=recursive,
            image_size=image_size,
            found_files=0,
            excluded_counts={},
            image_count=0,
            suggestions=suggest_input_paths(normalized),
        )
        return [], report

    if normalized.is_file() and normalized.suffix.lower() == ".json":
        items, excluded, found_files = _scan_manifest(normalized, image_size)
    elif normalized.is_file():
        items, excluded, found_files = _scan_paths([normalized], image_size)
    elif (normalized / MANIFEST_NAME).is_file():
        items, excluded, found_files = _scan_manifest(normalized / MANIFEST_NAME, image_size)
    elif recursive:
        items, excluded, found_files = _scan_paths(normalized.rglob("*"), image_size)
    else:
        items, excluded, found_files = _scan_paths(normalized.iterdir(), image_size)

    report = ScanReport(
        input_root=normalized,
        input_exists=True,
        recursive=recursive,
        image_size=image_size,
        found_files=found_files,
        excluded_counts=dict(excluded),
        image_count=len(items),
        suggestions=[],
    )
    logger.debug("scanned %s: %d images, %d excluded", normalized, len(items), report.excluded_total())
    return items, report


def build_scan_summary_lines(report: ScanReport) -> List[str]:
    size = "any" if report.image_size is None else "%dx%d" % tuple(report.image_size)
    lines = [
        f"Scan input: {report.input_root}",
        f"Scan mode: {'recursive' if report.recursive else 'flat'}",
        f"Expected image size: {size}",
        f"Files found: {report.found_files}, excluded: {report.excluded_total()}, images: {report.image_count}",
    ]
    if report.excluded_total() > 0:
        parts = [
            f"{reason.value}={report.excluded_counts[reason]}"
            for reason in ExclusionReason
            if report.excluded_counts.get(reason)
        ]
        lines.append("Excluded breakdown: " + ", ".join(parts))
    return lines


def build_no_images_message(report: ScanReport) -> List[str]:
    lines = ["no images found"]
    lines.extend(build_scan_summary_lines(report))

    if not report.input_exists:
        lines.append("Input path does not exist. Check the path or remove trailing quotes.")
        if report.suggestions:
            lines.append("Did you mean:")
            lines.extend(f"  - {p}" for p in report.suggestions)

    hints = []
    if not report.recursive:
        hints.append("Try --recursive to include subfolders")
    hints.append("Inputs must be PNG files or a dataset manifest.json")
    if report.excluded_counts.get(ExclusionReason.size_mismatch):
        hints.append("Images must match the ensemble's image size")
    lines.append("Next steps: " + "; ".join(hints))
    return lines


class NoImagesError(GatedFusionError):
    """Raised when a scan yields nothing to run on; ``report`` holds the details."""

    exit_code = 2

    def __init__(self, report: ScanReport) -> None:
        self.report = report
        super().__init__(f"no images found in {report.input_root}")
