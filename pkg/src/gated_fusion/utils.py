"""Utility helpers for gated_fusion."""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any, Tuple

import numpy as np

FORMAT_VERSION = 1

_SIZE_RE = re.compile(r"^(\d{1,4})x(\d{1,4})$")
_INT_LIST_RE = re.compile(r"^\s*-?\d+(\s*,\s*-?\d+)*\s*$")


def derive_seed(master: int, *names: object) -> int:
    """Derive a named sub-stream seed from a master seed.

    Names are hashed with CRC32 so that ``derive_seed(7, "expert", "S3")``
    is stable across processes and Python versions. The result is a
    non-negative 32-bit integer.
    """
    words = [int(master) & 0xFFFFFFFF]
    words.extend(zlib.crc32(str(name).encode("utf-8")) for name in names)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def make_rng(master: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))


def parse_image_size(value: str) -> Tuple[int, int]:
    """Parse a ``HEIGHTxWIDTH`` string such as ``32x32`` into ``(height, width)``.

    Raises
    -----
    ValueError
        If the format is invalid or a dimension is zero.
    """
    if not isinstance(value, str):
        raise ValueError(f"image size must be a string, got {type(value)!r}")
    m = _SIZE_RE.match(value.strip())
    if not m:
        raise ValueError(f"Invalid image size: {value!r}. Expected HEIGHTxWIDTH, e.g. 32x32.")
    height, width = int(m.group(1)), int(m.group(2))
    if height <= 0 or width <= 0:
        raise ValueError(f"Invalid image size: {value!r}. Dimensions must be positive.")
    return height, width


def format_image_size(size: Tuple[int, int]) -> str:
    return f"{size[0]}x{size[1]}"


def parse_int_list(value: str) -> Tuple[int, ...]:
    """Parse a comma separated list of integers, e.g. ``"1,2,3"``."""
    if not isinstance(value, str) or not _INT_LIST_RE.match(value):
        raise ValueError(f"Invalid integer list: {value!r}. Expected e.g. 1,2,3.")
    return tuple(int(part) for part in value.split(","))


def to_jsonable(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def dumps_json(payload: Any) -> str:
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def dump_json(path: Path, payload: Any) -> Path:
    """Write ``payload`` as deterministic JSON (sorted keys, trailing newline)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(payload), encoding="utf-8")
    return path
