"""Versioned binary weights container.

Layout (little-endian)::

    b"DVCR" | u32 version | u32 n | n bytes of JSON config
    | u32 tensor count | per tensor: u32 name len, name, u32 ndim, u32 dims..., f64 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"DVCR"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def encode_weights(config: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(config, sort_keys=True, ensure_ascii=False).encode()
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_weights(raw: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise WeightsFormatError(f"unexpected end of weights data at byte {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != MAGIC:
        raise WeightsFormatError("not a DVCR weights file")
    version = u32()
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    try:
        config = json.loads(take(u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"config block is not valid JSON: {exc}") from None
    tensors = {}
    for _ in range(u32()):
        try:
            name = take(u32()).decode()
        except UnicodeDecodeError:
            raise WeightsFormatError(f"tensor name is not UTF-8 near byte {pos}") from None
        ndim = u32()
        shape = tuple(u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise WeightsFormatError(f"tensor {name} has non-finite values")
        tensors[name] = arr
    if pos != len(raw):
        raise WeightsFormatError(f"trailing bytes after tensor table at byte {pos}")
    return config, tensors


def save_weights(path: str | Path, config: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_weights(config, tensors))


def load_weights(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return decode_weights(Path(path).read_bytes())
