"""Binary named-tensor container.

Layout (all integers little-endian)::

    b"FRSR" | u32 version=1 | u32 count
    per tensor: u16 name_len | name utf-8 | u8 dtype (0=f32) | u8 ndim | ndim x u32 dims | f32 payload
    u32 CRC32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CompatibilityError, CorruptionError, UnsupportedVersionError

MAGIC = b"FRSR"
VERSION = 1
DTYPE_F32 = 0


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptionError("not a FRSR container (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("CRC mismatch: container is corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            if dtype != DTYPE_F32:
                raise CorruptionError(f"tensor {name!r}: unknown dtype code {dtype}")
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(body):
                raise CorruptionError(f"tensor {name!r}: payload truncated")
            out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptionError(f"malformed container: {exc}") from None
    if pos != len(body):
        raise CorruptionError("trailing bytes after the last tensor")
    return out


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def save_checkpoint(model, path) -> None:
    write_tensors(path, {name: p.data for name, p in model.named_parameters()})


def load_checkpoint(model, path) -> None:
    """Restore parameters in place; names and shapes must match exactly."""
    tensors = read_tensors(path)
    params = dict(model.named_parameters())
    unknown = sorted(set(tensors) - set(params))
    if unknown:
        raise CompatibilityError(f"unknown tensor name(s) in checkpoint: {', '.join(unknown[:5])}")
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CompatibilityError(f"checkpoint lacks parameter(s): {', '.join(missing[:5])}")
    for name, arr in tensors.items():
        if arr.shape != params[name].shape:
            raise CompatibilityError(f"{name}: checkpoint shape {arr.shape} != model shape {params[name].shape}")
    for name, arr in tensors.items():
        params[name].data = arr.astype(params[name].dtype)
