"""Symmetric integer quantization and the requantization step of the datapath.

Every integer operation here is exact: codes and accumulators are held in
int64 numpy arrays and only narrowed when they are written out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def code_range(bits: int = 8) -> tuple[int, int]:
    """Signed two's-complement range for ``bits``."""
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def round_half_away_from_zero(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """2-D matrix of signed codes; the real value of an entry is ``scale * code``."""

    codes: np.ndarray
    scale: float
    bits: int = 8

    def __post_init__(self) -> None:
        codes = np.asarray(self.codes)
        if codes.ndim != 2:
            raise ValueError(f"codes must be 2-D, got shape {codes.shape}")
        if not np.issubdtype(codes.dtype, np.integer):
            raise TypeError(f"codes must be integers, got {codes.dtype}")
        lo, hi = code_range(self.bits)
        if codes.size and (codes.min() < lo or codes.max() > hi):
            raise ValueError(f"codes outside [{lo}, {hi}]")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        codes = codes.astype(np.int64)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def T(self) -> "QuantizedMatrix":
        return QuantizedMatrix(self.codes.T, self.scale, self.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.scale == other.scale
            and np.array_equal(self.codes, other.codes)
        )

    def __repr__(self) -> str:
        return f"QuantizedMatrix(shape={self.shape}, scale={self.scale!r}, bits={self.bits})"


@dataclass(frozen=True, eq=False)
class AccumMatrix:
    """Wide partial-sum matrix; entries must fit a signed ``bits``-wide register."""

    values: np.ndarray
    bits: int = 24
    scale: float = 1.0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.int64)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {values.shape}")
        lo, hi = code_range(self.bits)
        if values.size and (values.min() < lo or values.max() > hi):
            raise OverflowError(f"accumulator value outside {self.bits}-bit range")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class RequantParams:
    """Integer rescale ``acc * multiplier / 2**right_shift`` into an output code."""

    multiplier: int
    right_shift: int
    output_scale: float = field(default=1.0, compare=True)

    def __post_init__(self) -> None:
        if not 1 <= self.multiplier <= 255:
            raise ValueError(f"multiplier must be in [1, 255], got {self.multiplier}")
        if not 0 <= self.right_shift <= 31:
            raise ValueError(f"right_shift must be in [0, 31], got {self.right_shift}")
        if not (np.isfinite(self.output_scale) and self.output_scale > 0):
            raise ValueError(f"output_scale must be positive, got {self.output_scale!r}")

    @property
    def ratio(self) -> float:
        return self.multiplier / (1 << self.right_shift)

    @classmethod
    def from_ratio(cls, ratio: float, output_scale: float = 1.0) -> "RequantParams":
        """Closest multiplier/shift pair to ``ratio`` with the most precision.

        Picks the largest shift whose rounded multiplier still fits 8 bits.
        Ratios above 255 saturate at ``multiplier=255, right_shift=0``.
        """
        if not (np.isfinite(ratio) and ratio > 0):
            raise ValueError(f"ratio must be positive, got {ratio!r}")
        for shift in range(31, -1, -1):
            mult = int(np.floor(ratio * (1 << shift) + 0.5))
            if mult <= 255:
                return cls(max(mult, 1), shift, output_scale)
        return cls(255, 0, output_scale)

    @classmethod
    def unit(cls, output_scale: float = 1.0) -> "RequantParams":
        return cls(1, 0, output_scale)


def quantize(matrix, scale: float, bits: int = 8) -> QuantizedMatrix:
    """Map real values onto codes: ``clamp(round_half_away(value / scale))``."""
    values = np.asarray(matrix, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    if not (np.isfinite(scale) and scale > 0):
        raise ValueError(f"scale must be positive and finite, got {scale!r}")
    lo, hi = code_range(bits)
    codes = np.clip(round_half_away_from_zero(values / scale), lo, hi).astype(np.int64)
    return QuantizedMatrix(codes, scale, bits)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    return q.codes.astype(np.float64) * q.scale


def requantize(acc, params: RequantParams, bits: int = 8):
    """Rescale accumulator value(s) to ``bits``-wide codes.

    Rounds half away from zero in pure integer arithmetic, then saturates.
    Accepts a Python int or an integer array; returns the same kind.
    """
    scalar = np.isscalar(acc)
    prod = np.asarray(acc, dtype=np.int64) * params.multiplier
    shift = params.right_shift
    if shift:
        half = 1 << (shift - 1)
        rounded = np.where(prod >= 0, (prod + half) >> shift, -((-prod + half) >> shift))
    else:
        rounded = prod
    lo, hi = code_range(bits)
    out = np.clip(rounded, lo, hi)
    return int(out) if scalar else out.astype(np.int64)


def requantize_matrix(acc: AccumMatrix, params: RequantParams, bits: int = 8) -> QuantizedMatrix:
    return QuantizedMatrix(requantize(acc.values, params, bits), params.output_scale, bits)


def scale_for_range(max_abs: float, bits: int = 8) -> float:
    """Scale that maps ``[-max_abs, max_abs]`` onto ``[-(2^(bits-1)-1), 2^(bits-1)-1]``."""
    hi = (1 << (bits - 1)) - 1
    if not max_abs > 0:
        return 1.0 / hi
    return float(max_abs) / hi
