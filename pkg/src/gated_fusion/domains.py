"""Synthetic multi-domain detection data.

Each :class:`DomainSpec` stands for one camera location: it fixes the
background colour and texture, the size and shape statistics of the objects,
the sensor noise and the amount of clutter. Sample ``i`` of a dataset is a
pure function of ``(spec, seed, i)``.

On disk a dataset is a directory with ``images/<sample_id>.png``,
``annotations.jsonl`` (one record per image) and ``manifest.json``.
"""

from __future__ import annotations

import colorsys
import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from PIL import Image

from .errors import ArtifactIOError, ConfigError, IncompatibleVersionError, ValidationError
from .geometry import Box
from .presets import resolve_preset
from .utils import FORMAT_VERSION, derive_seed, dump_json, make_rng

logger = logging.getLogger(__name__)

MAX_PLACEMENT_TRIES = 60
BACKGROUND_SATURATION = 0.45
BACKGROUND_VALUE = 0.55
OBJECT_SATURATION = 0.85
OBJECT_VALUE = 0.9


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    background_hue: float
    texture_amplitude: float = 0.0
    object_count_range: Tuple[int, int] = (1, 3)
    object_scale_range: Tuple[float, float] = (8.0, 12.0)
    object_aspect_range: Tuple[float, float] = (0.8, 1.25)
    noise_sigma: float = 0.0
    occluder_density: float = 0.0
    object_hue: float = 0.0
    texture_period: float = 8.0
    class_set: Tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "object_count_range", tuple(int(v) for v in self.object_count_range))
        object.__setattr__(self, "object_scale_range", tuple(float(v) for v in self.object_scale_range))
        object.__setattr__(self, "object_aspect_range", tuple(float(v) for v in self.object_aspect_range))
        object.__setattr__(self, "class_set", tuple(int(v) for v in self.class_set))
        if not self.domain_id or not isinstance(self.domain_id, str):
            raise ConfigError("domain_id must be a non-empty string")
        for name in ("object_count_range", "object_scale_range", "object_aspect_range"):
            rng = getattr(self, name)
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ConfigError(f"{self.domain_id}: {name} must be [min, max] with min <= max, got {list(rng)}")
        if self.object_count_range[0] < 1:
            raise ConfigError(f"{self.domain_id}: object_count_range must be >= 1")
        if self.object_scale_range[0] < 2.0:
            raise ConfigError(f"{self.domain_id}: object_scale_range must be >= 2 pixels")
        if self.object_aspect_range[0] <= 0:
            raise ConfigError(f"{self.domain_id}: object_aspect_range must be positive")
        if self.noise_sigma < 0:
            raise ConfigError(f"{self.domain_id}: noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.texture_amplitude < 0 or self.texture_period <= 0:
            raise ConfigError(f"{self.domain_id}: texture_amplitude must be >= 0 and texture_period > 0")
        if not 0.0 <= self.occluder_density <= 1.0:
            raise ConfigError(f"{self.domain_id}: occluder_density must be in [0, 1]")
        if not self.class_set or min(self.class_set) < 0:
            raise ConfigError(f"{self.domain_id}: class_set must be non-empty non-negative ids")

    @property
    def num_classes(self) -> int:
        return max(self.class_set) + 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "domain_id": self.domain_id,
            "background_hue": self.background_hue,
            "texture_amplitude": self.texture_amplitude,
            "texture_period": self.texture_period,
            "object_count_range": list(self.object_count_range),
            "object_scale_range": list(self.object_scale_range),
            "object_aspect_range": list(self.object_aspect_range),
            "object_hue": self.object_hue,
            "noise_sigma": self.noise_sigma,
            "occluder_density": self.occluder_density,
            "class_set": list(self.class_set),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DomainSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown DomainSpec field: {unknown[0]}")
        if "domain_id" not in data or "background_hue" not in data:
            raise ConfigError("DomainSpec needs at least domain_id and background_hue")
        return cls(**data)


@dataclass(frozen=True)
class SceneSample:
    """One generated image (``float32``, ``(3, H, W)``, values in ``[0, 1]``) with its boxes."""

    sample_id: str
    image: np.ndarray = field(repr=False)
    boxes: Tuple[Box, ...]
    classes: Tuple[int, ...]

    @property
    def image_size(self) -> Tuple[int, int]:
        return int(self.image.shape[1]), int(self.image.shape[2])

    def gt_array(self) -> np.ndarray:
        return np.asarray([b.as_list() for b in self.boxes], dtype=np.float64).reshape(-1, 4)

    def record(self, image_path: str) -> Dict[str, Any]:
        return {
            "image": image_path,
            "boxes": [b.as_list() for b in self.boxes],
            "classes": list(self.classes),
        }


@dataclass(frozen=True)
class DatasetManifest:
    domain_id: str
    seed: int
    image_size: Tuple[int, int]
    spec: Optional[DomainSpec]
    records: Tuple[Dict[str, Any], ...]
    config: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "domain_id": self.domain_id,
            "seed": self.seed,
            "image_size": list(self.image_size),
            "spec": self.spec.to_dict() if self.spec is not None else None,
            "records": list(self.records),
            "config": self.config,
        }


# ---------------------------------------------------------------------------
# generation


def background_rgb(spec: DomainSpec) -> Tuple[float, float, float]:
    return colorsys.hsv_to_rgb(spec.background_hue % 1.0, BACKGROUND_SATURATION, BACKGROUND_VALUE)


def quantize(canvas: np.ndarray) -> np.ndarray:
    """``(H, W, 3)`` floats -> ``(3, H, W)`` float32 values that survive an 8-bit PNG round trip."""
    u8 = np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
    return u8_to_image(u8)


def u8_to_image(u8: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(u8.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0))


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0))


def _sample_rng(spec: DomainSpec, seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(index), zlib.crc32(spec.domain_id.encode("utf-8"))])


def _paint_background(spec: DomainSpec, rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    canvas = np.empty((height, width, 3), dtype=np.float64)
    canvas[:] = background_rgb(spec)
    if spec.texture_amplitude > 0:
        angle = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2 * math.pi)
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        wave = np.sin(2 * math.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / spec.texture_period + phase)
        canvas += spec.texture_amplitude * wave[..., None]
    return canvas


def _paint_occluders(spec: DomainSpec, rng: np.random.Generator, canvas: np.ndarray) -> None:
    height, width = canvas.shape[:2]
    count = int(rng.binomial(6, spec.occluder_density)) if spec.occluder_density > 0 else 0
    for _ in range(count):
        w = int(rng.integers(2, max(3, width // 5)))
        h = int(rng.integers(2, max(3, height // 5)))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        canvas[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.1, 0.9)


def _object_mask(shape: str, h: int, w: int) -> np.ndarray:
    if shape == "rect":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ny = (yy + 0.5 - h / 2.0) / (h / 2.0)
    nx = (xx + 0.5 - w / 2.0) / (w / 2.0)
    return nx * nx + ny * ny <= 1.0


def _place_objects(
    spec: DomainSpec,
    rng: np.random.Generator,
    count: int,
    height: int,
    width: int,
) -> Optional[List[Tuple[int, int, int, int]]]:
    placed: List[Tuple[int, int, int, int]] = []
    for _ in range(count):
        for _attempt in range(MAX_PLACEMENT_TRIES):
            scale = rng.uniform(*spec.object_scale_range)
            aspect = rng.uniform(*spec.object_aspect_range)
            w = int(np.clip(round(scale / math.sqrt(aspect)), 2, width))
            h = int(np.clip(round(scale * math.sqrt(aspect)), 2, height))
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            rect = (x0, y0, x0 + w, y0 + h)
            # one pixel of clearance keeps neighbouring boxes disjoint
            if all(
                rect[2] + 1 <= o[0] or o[2] + 1 <= rect[0] or rect[3] + 1 <= o[1] or o[3] + 1 <= rect[1]
                for o in placed
            ):
                placed.append(rect)
                break
        else:
            return None
    return placed


def generate_sample(spec: DomainSpec, index: int, seed: int, image_size: Tuple[int, int]) -> SceneSample:
    height, width = image_size
    rng = _sample_rng(spec, seed, index)
    canvas = _paint_background(spec, rng, height, width)
    _paint_occluders(spec, rng, canvas)

    count = int(rng.integers(spec.object_count_range[0], spec.object_count_range[1] + 1))
    rects = _place_objects(spec, rng, count, height, width)
    while rects is None:
        count -= 1
        logger.warning("%s #%d: object placement failed, retrying with %d objects", spec.domain_id, index, count)
        rects = [] if count == 0 else _place_objects(spec, rng, count, height, width)

    boxes: List[Box] = []
    classes: List[int] = []
    for x0, y0, x1, y1 in rects:
        shape = "rect" if rng.random() < 0.5 else "ellipse"
        mask = _object_mask(shape, y1 - y0, x1 - x0)
        hue = (spec.object_hue + rng.uniform(-0.03, 0.03)) % 1.0
        color = colorsys.hsv_to_rgb(hue, OBJECT_SATURATION, OBJECT_VALUE * rng.uniform(0.85, 1.0))
        region = canvas[y0:y1, x0:x1]
        region[mask] = color
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        boxes.append(Box(x0 + cols[0], y0 + rows[0], x0 + cols[-1] + 1, y0 + rows[-1] + 1))
        classes.append(int(spec.class_set[int(rng.integers(0, len(spec.class_set)))]))

    if spec.noise_sigma > 0:
        canvas += rng.normal(0.0, spec.noise_sigma, size=canvas.shape)

    return SceneSample(
        sample_id=f"{spec.domain_id}-{index:05d}",
        image=quantize(canvas),
        boxes=tuple(boxes),
        classes=tuple(classes),
    )


def generate_domain_dataset(
    spec: DomainSpec,
    n: int,
    seed: int,
    image_size: Tuple[int, int],
    workers: int = 1,
) -> List[SceneSample]:
    if n < 1:
        raise ValidationError(f"{spec.domain_id}: dataset size must be >= 1, got {n}")
    height, width = image_size
    if height < 8 or width < 8:
        raise ValidationError(f"image size {height}x{width} too small (min 8x8)")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda i: generate_sample(spec, i, seed, image_size), range(n)))
    else:
        samples = [generate_sample(spec, i, seed, image_size) for i in range(n)]
    logger.info("generated %d samples for %s (seed %d)", n, spec.domain_id, seed)
    return samples


# ---------------------------------------------------------------------------
# storage


def write_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_to_u8(image)).save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            u8 = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"image file not found: {path}") from exc
    except OSError as exc:
        raise ArtifactIOError(f"unreadable image file {path}: {exc}") from exc
    return u8_to_image(u8)


def save_dataset(
    samples: Sequence[SceneSample],
    manifest_path: Path,
    *,
    spec: Optional[DomainSpec],
    seed: int,
    config: Optional[Dict[str, Any]] = None,
) -> DatasetManifest:
    """Write images, ``annotations.jsonl`` and the manifest next to ``manifest_path``."""
    if not samples:
        raise ValidationError("refusing to save an empty dataset")
    root = manifest_path.parent
    records = []
    for sample in samples:
        rel = f"images/{sample.sample_id}.png"
        write_png(root / rel, sample.image)
        records.append(sample.record(rel))
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    (root / "annotations.jsonl").write_text(lines, encoding="utf-8")

    manifest = DatasetManifest(
        domain_id=spec.domain_id if spec is not None else samples[0].sample_id.rsplit("-", 1)[0],
        seed=int(seed),
        image_size=samples[0].image_size,
        spec=spec,
        records=tuple(records),
        config=dict(config or {}),
    )
    dump_json(manifest_path, manifest.to_dict())
    logger.info("wrote %d samples to %s", len(samples), root)
    return manifest


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactIOError(f"corrupt JSON in {path}: {exc}") from exc


def _sample_from_record(root: Path, record: Dict[str, Any], where: str) -> SceneSample:
    try:
        rel = str(record["image"])
        boxes = tuple(Box.from_array(b) for b in record["boxes"])
        classes = tuple(int(c) for c in record["classes"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{where}: malformed annotation record {record!r}") from exc
    if len(boxes) != len(classes):
        raise ValidationError(f"{where}: {rel} has {len(boxes)} boxes but {len(classes)} classes")
    image = read_png(root / rel)
    return SceneSample(sample_id=Path(rel).stem, image=image, boxes=boxes, classes=classes)


def load_dataset(manifest_path: Path) -> Tuple[DatasetManifest, List[SceneSample]]:
    data = _read_json(manifest_path)
    if not isinstance(data, dict):
        raise ValidationError(f"{manifest_path}: manifest root must be a mapping")
    version = int(data.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(manifest_path, version, FORMAT_VERSION)

    root = manifest_path.parent
    records = data.get("records") or []
    ann_path = root / "annotations.jsonl"
    try:
        ann_lines = [ln for ln in ann_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"annotation file not found: {ann_path}") from exc
    if len(ann_lines) != len(records):
        raise ValidationError(
            f"{ann_path}: {len(ann_lines)} annotation records but manifest lists {len(records)} samples"
        )
    try:
        annotations = [json.loads(ln) for ln in ann_lines]
    except json.JSONDecodeError as exc:
        raise ArtifactIOError(f"corrupt annotation line in {ann_path}: {exc}") from exc

    samples = [_sample_from_record(root, rec, str(ann_path)) for rec in annotations]
    spec = DomainSpec.from_dict(data["spec"]) if data.get("spec") else None
    manifest = DatasetManifest(
        domain_id=str(data.get("domain_id", "")),
        seed=int(data.get("seed", 0)),
        image_size=tuple(int(v) for v in data.get("image_size", samples[0].image_size if samples else (0, 0))),
        spec=spec,
        records=tuple(records),
        config=dict(data.get("config") or {}),
        format_version=version,
    )
    logger.info("loaded %d samples from %s", len(samples), manifest_path)
    return manifest, samples


def load_domain_spec(path: Path) -> DomainSpec:
    """Read a single ``DomainSpec`` from a YAML (or JSON) mapping."""
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"Domain spec file {path} cannot be read: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"Domain spec file {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: domain spec root must be a mapping")
    return DomainSpec.from_dict({str(k).strip().lower().replace("-", "_"): v for k, v in data.items()})


# ---------------------------------------------------------------------------
# experiment layouts


@dataclass(frozen=True)
class LayoutPreset:
    num_sources: int
    few_shot_sizes: Tuple[int, ...]
    matched_sources: Tuple[int, ...]
    # identical: the target is an exact copy of its matched source
    identical: bool = False


PRESET_LAYOUTS: Dict[str, LayoutPreset] = {
    "small5": LayoutPreset(num_sources=5, few_shot_sizes=(60,), matched_sources=(4,)),
    "wide30": LayoutPreset(num_sources=30, few_shot_sizes=(44, 80, 115, 103), matched_sources=(1, 0, 10, 14)),
    "identity5": LayoutPreset(num_sources=5, few_shot_sizes=(60,), matched_sources=(2,), identical=True),
    "single1": LayoutPreset(num_sources=1, few_shot_sizes=(60,), matched_sources=(0,), identical=True),
}


@dataclass(frozen=True)
class TargetPair:
    target: DomainSpec
    few_shot: DomainSpec
    few_shot_size: int
    matched_source: int


@dataclass(frozen=True)
class ExperimentDomains:
    preset: str
    seed: int
    sources: Tuple[DomainSpec, ...]
    targets: Tuple[TargetPair, ...]
    hue_margin: float


def hue_distance(a: float, b: float) -> float:
    d = abs((a - b) % 1.0)
    return min(d, 1.0 - d)


def _source_spec(index: int, total: int, rng: np.random.Generator) -> DomainSpec:
    hue = ((index + 0.5) / total + rng.uniform(-0.2, 0.2) / total) % 1.0
    base_scale = rng.uniform(7.0, 13.0)
    aspect_mid = rng.uniform(0.6, 1.6)
    return DomainSpec(
        domain_id=f"S{index + 1}",
        background_hue=round(hue, 6),
        texture_amplitude=round(rng.uniform(0.02, 0.12), 6),
        texture_period=round(rng.uniform(4.0, 12.0), 6),
        object_count_range=(1, int(rng.integers(2, 4))),
        object_scale_range=(round(base_scale * 0.8, 6), round(base_scale * 1.2, 6)),
        object_aspect_range=(round(aspect_mid * 0.85, 6), round(aspect_mid * 1.15, 6)),
        object_hue=round(rng.uniform(0.0, 1.0), 6),
        noise_sigma=round(rng.uniform(0.01, 0.05), 6),
        occluder_density=round(rng.uniform(0.0, 0.4), 6),
    )


def perturb_viewpoint(spec: DomainSpec, domain_id: str, rng: np.random.Generator, max_shift: float = 0.2) -> DomainSpec:
    """Nuisance-only variant of ``spec``: hue jitter plus a bounded scale shift."""
    factor = 1.0 + rng.uniform(-max_shift, max_shift)
    lo, hi = spec.object_scale_range
    return replace(
        spec,
        domain_id=domain_id,
        background_hue=round((spec.background_hue + rng.uniform(-0.02, 0.02)) % 1.0, 6),
        object_scale_range=(round(max(2.0, lo * factor), 6), round(max(2.0, hi * factor), 6)),
    )


def make_experiment_domains(preset_name: str, seed: int) -> ExperimentDomains:
    preset_name = resolve_preset(preset_name)
    layout = PRESET_LAYOUTS[preset_name]
    rng = make_rng(seed, "layout", preset_name)
    sources = tuple(_source_spec(i, layout.num_sources, rng) for i in range(layout.num_sources))

    targets = []
    for t, (matched, size) in enumerate(zip(layout.matched_sources, layout.few_shot_sizes), start=1):
        base = sources[matched]
        if layout.identical:
            target = replace(base, domain_id=f"T{t}")
        else:
            # close to its matched source but not a copy of it
            target = perturb_viewpoint(base, f"T{t}", make_rng(seed, "target", preset_name, t), max_shift=0.1)
        few_shot = perturb_viewpoint(target, f"T{t}p", make_rng(seed, "few-shot", preset_name, t))
        targets.append(TargetPair(target=target, few_shot=few_shot, few_shot_size=size, matched_source=matched))

    domains = ExperimentDomains(
        preset=preset_name,
        seed=int(seed),
        sources=sources,
        targets=tuple(targets),
        hue_margin=0.5 / layout.num_sources,
    )
    logger.debug("preset %s: %d sources, %d targets", preset_name, len(sources), len(targets))
    return domains


def domain_seed(seed: int, domain_id: str, split: str = "train") -> int:
    return derive_seed(seed, "domain", domain_id, split)
