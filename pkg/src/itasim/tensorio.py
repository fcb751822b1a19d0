"""Binary tensor files.

Layout (all little-endian)::

    offset  size  field
    0       4     magic b"ITAQ"
    4       1     version (1)
    5       1     element type: 0 = int8, 1 = int32 accumulator, 2 = uint8
    6       4     rows (u32)
    10      4     cols (u32)
    14      2     padding (zero)
    16      ...   row-major payload
    end-8   8     scale (IEEE-754 binary64)
"""

from __future__ import annotations

import enum
import os
import struct
from pathlib import Path

import numpy as np

from .quant import AccumMatrix, QuantizedMatrix

MAGIC = b"ITAQ"
VERSION = 1
_HEADER = struct.Struct("<4sBBII2x")
_SCALE = struct.Struct("<d")


class ElementType(enum.IntEnum):
    INT8 = 0
    INT32_ACCUM = 1
    UINT8 = 2


_DTYPES = {
    ElementType.INT8: np.dtype("<i1"),
    ElementType.INT32_ACCUM: np.dtype("<i4"),
    ElementType.UINT8: np.dtype("u1"),
}


class TensorFormatError(ValueError):
    pass


def encode(codes: np.ndarray, scale: float, etype: ElementType) -> bytes:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError(f"tensor must be 2-D, got shape {codes.shape}")
    dtype = _DTYPES[etype]
    info = np.iinfo(dtype)
    if codes.size and (codes.min() < info.min or codes.max() > info.max):
        raise ValueError(f"values do not fit {etype.name}")
    rows, cols = codes.shape
    payload = np.ascontiguousarray(codes, dtype=dtype).tobytes()
    return _HEADER.pack(MAGIC, VERSION, int(etype), rows, cols) + payload + _SCALE.pack(float(scale))


def decode(blob: bytes) -> tuple[np.ndarray, float, ElementType]:
    """Inverse of :func:`encode`; returns ``(int64 codes, scale, element type)``."""
    if len(blob) < _HEADER.size + _SCALE.size:
        raise TensorFormatError("file too short for header")
    magic, version, etype, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    try:
        etype = ElementType(etype)
    except ValueError:
        raise TensorFormatError(f"unknown element type {etype}") from None
    dtype = _DTYPES[etype]
    expected = _HEADER.size + rows * cols * dtype.itemsize + _SCALE.size
    if len(blob) != expected:
        raise TensorFormatError(f"expected {expected} bytes for {rows}x{cols} {etype.name}, got {len(blob)}")
    payload = np.frombuffer(blob, dtype=dtype, count=rows * cols, offset=_HEADER.size)
    (scale,) = _SCALE.unpack_from(blob, expected - _SCALE.size)
    return payload.reshape(rows, cols).astype(np.int64), scale, etype


def _write_atomic(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def save_quantized(path, q: QuantizedMatrix) -> None:
    if q.bits != 8:
        raise ValueError("only 8-bit code matrices have a file encoding")
    _write_atomic(Path(path), encode(q.codes, q.scale, ElementType.INT8))


def save_accum(path, acc: AccumMatrix) -> None:
    _write_atomic(Path(path), encode(acc.values, acc.scale, ElementType.INT32_ACCUM))


def save_probs(path, probs: np.ndarray, scale: float = 1.0 / 255) -> None:
    _write_atomic(Path(path), encode(probs, scale, ElementType.UINT8))


def load(path) -> tuple[np.ndarray, float, ElementType]:
    return decode(Path(path).read_bytes())


def load_quantized(path) -> QuantizedMatrix:
    codes, scale, etype = load(path)
    if etype is not ElementType.INT8:
        raise TensorFormatError(f"{path}: expected int8 tensor, found {etype.name}")
    return QuantizedMatrix(codes, scale)
