"""Binary model container shared by expert and gating model files.

Layout (little-endian)::

    magic        4 bytes ("GFEX" expert, "GFGT" gate)
    version      u32
    meta_len     u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count        u32
    count x      u16 name_len, name, u8 ndim, ndim x u32 dims, float32 data
    crc32        u32 over the version field and everything after it
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from .errors import ArtifactIOError, ChecksumError, IncompatibleVersionError, ValidationError
from .utils import FORMAT_VERSION, to_jsonable

logger = logging.getLogger(__name__)

EXPERT_MAGIC = b"GFEX"
GATING_MAGIC = b"GFGT"


def encode_container(
    magic: bytes,
    metadata: Mapping[str, Any],
    params: Mapping[str, np.ndarray],
    version: int = FORMAT_VERSION,
) -> bytes:
    meta = json.dumps(to_jsonable(dict(metadata)), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = bytearray()
    payload += struct.pack("<I", len(meta))
    payload += meta
    payload += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f4"))
        raw_name = name.encode("utf-8")
        payload += struct.pack("<H", len(raw_name))
        payload += raw_name
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.tobytes(order="C")
    head = magic + struct.pack("<I", version)
    body = bytes(payload)
    crc = zlib.crc32(struct.pack("<I", version) + body) & 0xFFFFFFFF
    return head + body + struct.pack("<I", crc)


def decode_container(
    data: bytes,
    magic: bytes,
    source: object = "<bytes>",
) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if len(data) < 8:
        raise ChecksumError(f"{source}: truncated model file ({len(data)} bytes)")
    if data[:4] != magic:
        raise ValidationError(f"{source}: not a {magic.decode()} model file (magic {data[:4]!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(source, version, FORMAT_VERSION)
    if len(data) < 16:
        raise ChecksumError(f"{source}: truncated model file ({len(data)} bytes)")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[4:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{source}: checksum mismatch, file is corrupt or truncated")

    try:
        offset = 8
        (meta_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        metadata = json.loads(data[offset : offset + meta_len].decode("utf-8"))
        offset += meta_len
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        params: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape)
            offset += 4 * size
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ChecksumError(f"{source}: malformed model payload: {exc}") from exc
    if offset != len(data) - 4:
        raise ChecksumError(f"{source}: {len(data) - 4 - offset} trailing bytes in model payload")
    return metadata, params


def write_container(path: Path, magic: bytes, metadata: Mapping[str, Any], params: Mapping[str, np.ndarray]) -> Path:
    blob = encode_container(magic, metadata, params)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write model file {path}: {exc}") from exc
    logger.info("wrote %s (%d params, %d bytes)", path, len(params), len(blob))
    return path


def read_container(path: Path, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"model file not found: {path}") from exc
    except OSError as exc:
        raise ArtifactIOError(f"cannot read model file {path}: {exc}") from exc
    return decode_container(data, magic, source=path)
