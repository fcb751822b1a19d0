"""Integer-only streaming softmax.

Softmax inputs are int8 codes with the fixed scale ``ln2 * B / 2^B``, so that
``exp(scale * x) == 2 ** (x * B / 2^B)``.  Rounding the exponent down to an
integer turns every power of two into a right shift by
``(max - x) >> (B - log2 B)``, and the whole operator needs only comparators,
adders, shifters and one divider per row.

A row is consumed in parts (one tile's worth of columns at a time) in three
phases:

* DA, denominator accumulation: keep a running row max and a running sum of
  ``unit >> shift`` terms, rescaling the stored sum when the max grows.
* DI, denominator inversion: ``inv = (2^B - 1) * unit // sum`` on a serial divider.
* EN, element normalization: ``p = inv >> ((max - x) >> shift_amount)``; ``p``
  is an unsigned code with scale ``1 / (2^B - 1)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class InvariantViolation(AssertionError):
    """Raised when the streaming state reaches a condition the schedule must prevent."""


class PhaseError(RuntimeError):
    pass


@dataclass(frozen=True)
class SoftmaxConstants:
    B: int = 8

    def __post_init__(self) -> None:
        if self.B < 4 or self.B & (self.B - 1):
            raise ValueError(f"B must be a power of two >= 4, got {self.B}")

    @property
    def shift_amount(self) -> int:
        return self.B - int(math.log2(self.B))

    @property
    def unit(self) -> int:
        return 1 << (self.B - 1)

    @property
    def sum_bits(self) -> int:
        return 2 * self.B - 1

    @property
    def sum_max(self) -> int:
        return (1 << self.sum_bits) - 1

    @property
    def inv_bits(self) -> int:
        return 2 * self.B

    @property
    def out_max(self) -> int:
        return (1 << self.B) - 1

    @property
    def numerator(self) -> int:
        """Dividend of the inversion, ``(2^B - 1) * unit`` (32640 for B=8)."""
        return self.out_max * self.unit

    @property
    def epsilon_prime(self) -> float:
        return self.B / (1 << self.B)

    @property
    def input_scale(self) -> float:
        """Real value of one softmax input code, ``B / (2^B * log2 e)``."""
        return self.epsilon_prime * math.log(2.0)

    @property
    def max_row_length(self) -> int:
        """Longest row whose sum cannot saturate."""
        return self.sum_max // self.unit

    @property
    def code_min(self) -> int:
        return -(1 << (self.B - 1))

    @property
    def code_max(self) -> int:
        return (1 << (self.B - 1)) - 1


DEFAULT_CONSTANTS = SoftmaxConstants()


def serial_divide(dividend: int, divisor: int, width: int = 16) -> tuple[int, int]:
    """Restoring division, one quotient bit per cycle.

    Returns ``(quotient, cycles)``.  ``dividend`` must fit ``width`` bits.
    """
    if divisor <= 0:
        raise ZeroDivisionError("serial divider given a zero divisor")
    if not 0 <= dividend < (1 << width):
        raise ValueError(f"dividend {dividend} does not fit {width} bits")
    remainder = 0
    quotient = 0
    for bit in range(width - 1, -1, -1):
        remainder = (remainder << 1) | ((dividend >> bit) & 1)
        quotient <<= 1
        if remainder >= divisor:
            remainder -= divisor
            quotient |= 1
    return quotient, width


class Phase(enum.Enum):
    DA = "DA"
    DI_DONE = "DI-done"
    EN = "EN"


class RescaleOrder(enum.Enum):
    BEFORE_ADD = "before-add"
    # Mutant used to prove the equivalence checks are sensitive: the current
    # part is summed against its own max and the rescale is applied to the
    # combined sum afterwards.
    AFTER_ADD = "after-add"


class SoftmaxState:
    """Per-tile streaming buffers: MAX, sum, and inverted sum for ``rows`` tile rows."""

    def __init__(
        self,
        rows: int = 64,
        constants: SoftmaxConstants = DEFAULT_CONSTANTS,
        rescale_order: RescaleOrder | str = RescaleOrder.BEFORE_ADD,
    ):
        if rows <= 0:
            raise ValueError("rows must be positive")
        self.rows = rows
        self.constants = constants
        self.rescale_order = RescaleOrder(rescale_order)
        self.reset()

    def reset(self) -> None:
        self.max_buf = np.zeros(self.rows, dtype=np.int64)
        self.sum_buf = np.zeros(self.rows, dtype=np.int64)
        self.inv_buf = np.zeros(self.rows, dtype=np.int64)
        self.initialized = np.zeros(self.rows, dtype=bool)
        self.inverted = np.zeros(self.rows, dtype=bool)
        self.saturated = np.zeros(self.rows, dtype=bool)
        self.rescale_events = np.zeros(self.rows, dtype=np.int64)
        self.phase = Phase.DA

    # -- DA ---------------------------------------------------------------

    def da_update(self, row: int, part) -> "SoftmaxState":
        """Fold one part of tile row ``row`` into the running max and sum."""
        self._check_row(row)
        part = np.asarray(part, dtype=np.int64).reshape(1, -1)
        self.da_update_block(part, row_offset=row)
        return self

    def da_update_block(self, tile, row_offset: int = 0) -> "SoftmaxState":
        """Vectorized :meth:`da_update` for consecutive rows ``row_offset...``."""
        if self.phase is not Phase.DA:
            raise PhaseError(f"DA update while in phase {self.phase.value}")
        tile = np.asarray(tile, dtype=np.int64)
        if tile.ndim != 2 or tile.shape[1] == 0:
            raise ValueError("DA needs a nonempty 2-D part")
        n = tile.shape[0]
        if row_offset < 0 or row_offset + n > self.rows:
            raise IndexError(f"rows {row_offset}..{row_offset + n - 1} outside buffer of {self.rows}")
        c = self.constants
        if tile.min() < c.code_min or tile.max() > c.code_max:
            raise ValueError(f"softmax inputs must be {c.B}-bit signed codes")

        sl = slice(row_offset, row_offset + n)
        init = self.initialized[sl]
        max_p = self.max_buf[sl]
        sum_p = self.sum_buf[sl]
        sh = c.shift_amount

        max_c = tile.max(axis=1)
        max_new = np.where(init, np.maximum(max_p, max_c), max_c)
        if self.rescale_order is RescaleOrder.BEFORE_ADD:
            local = (c.unit >> ((max_new[:, None] - tile) >> sh)).sum(axis=1)
            stale = np.where(init, sum_p >> ((max_new - max_p) >> sh), 0)
            total = stale + local
        else:
            local = (c.unit >> ((max_c[:, None] - tile) >> sh)).sum(axis=1)
            lower = np.minimum(max_p, max_c)
            total = np.where(init, (sum_p + local) >> ((max_new - lower) >> sh), local)

        self.rescale_events[sl] += init & (max_c > max_p)
        self.saturated[sl] |= total > c.sum_max
        self.sum_buf[sl] = np.minimum(total, c.sum_max)
        self.max_buf[sl] = max_new
        self.initialized[sl] = True
        return self

    # -- DI ---------------------------------------------------------------

    def di_invert(self, row: int) -> "SoftmaxState":
        """Invert the finished denominator of ``row`` on the serial divider model."""
        self._check_row(row)
        if self.phase is Phase.EN:
            raise PhaseError("DI after EN started; reset the state first")
        if not self.initialized[row]:
            raise InvariantViolation(f"row {row} has no accumulated denominator")
        denom = int(self.sum_buf[row])
        if denom < self.constants.unit:
            raise InvariantViolation(f"row {row} denominator {denom} below one unit")
        quotient, _ = serial_divide(self.constants.numerator, denom, self.constants.inv_bits)
        self.inv_buf[row] = quotient
        self.inverted[row] = True
        self.phase = Phase.DI_DONE
        return self

    def di_invert_all(self) -> "SoftmaxState":
        """Invert every row that received DA input."""
        for row in np.flatnonzero(self.initialized):
            self.di_invert(int(row))
        return self

    # -- EN ---------------------------------------------------------------

    def en_normalize(self, row: int, x: int) -> int:
        self._check_row(row)
        return int(self.en_normalize_block(np.array([[x]]), row_offset=row)[0, 0])

    def en_normalize_block(self, codes, row_offset: int = 0) -> np.ndarray:
        """Normalize stored attention codes of rows ``row_offset...`` to probabilities."""
        codes = np.asarray(codes, dtype=np.int64)
        n = codes.shape[0]
        if row_offset < 0 or row_offset + n > self.rows:
            raise IndexError(f"rows {row_offset}..{row_offset + n - 1} outside buffer of {self.rows}")
        sl = slice(row_offset, row_offset + n)
        if not self.inverted[sl].all():
            raise PhaseError("EN on a row whose denominator was not inverted")
        max_b = self.max_buf[sl][:, None]
        if (codes > max_b).any():
            raise InvariantViolation("EN input exceeds the stored row maximum")
        self.phase = Phase.EN
        shift = (max_b - codes) >> self.constants.shift_amount
        return (self.inv_buf[sl][:, None] >> shift).astype(np.int64)

    def _check_row(self, row: int) -> None:
        if not 0 <= row < self.rows:
            raise IndexError(f"row {row} outside buffer of {self.rows}")

    def snapshot(self) -> dict:
        return {
            "max": self.max_buf.tolist(),
            "sum": self.sum_buf.tolist(),
            "inv": self.inv_buf.tolist(),
            "saturated": bool(self.saturated.any()),
        }


def part_bounds(length: int, part_width: int) -> list[tuple[int, int]]:
    return [(start, min(start + part_width, length)) for start in range(0, length, part_width)]


def streaming_softmax(
    rows,
    part_width: int = 64,
    constants: SoftmaxConstants = DEFAULT_CONSTANTS,
    rescale_order: RescaleOrder | str = RescaleOrder.BEFORE_ADD,
) -> np.ndarray:
    """Run DA over column parts, then DI, then EN, for every row of a 2-D batch."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.shape[1] == 0:
        raise ValueError("softmax rows must be nonempty")
    state = SoftmaxState(rows.shape[0], constants, rescale_order)
    for lo, hi in part_bounds(rows.shape[1], part_width):
        state.da_update_block(rows[:, lo:hi])
    state.di_invert_all()
    return state.en_normalize_block(rows)


def softmax_row_integer_oracle(row, constants: SoftmaxConstants = DEFAULT_CONSTANTS) -> list[int]:
    """Single-pass integer softmax with the row maximum known up front."""
    row = [int(v) for v in row]
    if not row:
        raise ValueError("row must be nonempty")
    if len(row) > constants.max_row_length:
        raise ValueError(f"rows longer than {constants.max_row_length} would saturate the sum")
    top = max(row)
    shifts = [(top - x) >> constants.shift_amount for x in row]
    denom = sum(constants.unit >> s for s in shifts)
    inv = constants.numerator // denom
    return [inv >> s for s in shifts]


def softmax_row_rational_oracle(row, constants: SoftmaxConstants = DEFAULT_CONSTANTS) -> list[int]:
    """Exact-rational evaluation of the integer softmax, floors taken explicitly.

    Uses no shift operators: every power of two is an exact ``Fraction``.
    """
    row = [int(v) for v in row]
    top = max(row)
    step = Fraction(1 << constants.B, constants.B)
    exps = [math.floor(Fraction(top - x) / step) for x in row]
    denom = sum(Fraction(constants.unit) / Fraction(2) ** e for e in exps)
    inv = math.floor(Fraction(constants.numerator) / denom)
    return [math.floor(Fraction(inv) / Fraction(2) ** e) for e in exps]


def softmax_row_float_oracle(row, constants: SoftmaxConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Real-valued base-2 softmax of the codes, ``2^(eps' (x - max))`` normalized."""
    x = np.asarray(row, dtype=np.float64)
    if x.size == 0:
        raise ValueError("row must be nonempty")
    e = np.exp2(constants.epsilon_prime * (x - x.max(axis=-1, keepdims=True)))
    return e / e.sum(axis=-1, keepdims=True)


def mae(integer_out, float_out, constants: SoftmaxConstants = DEFAULT_CONSTANTS) -> float:
    """Mean absolute error between dequantized integer probabilities and reals."""
    a = np.asarray(integer_out, dtype=np.float64)
    b = np.asarray(float_out, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty inputs")
    return float(np.abs(a / constants.out_max - b).mean())
