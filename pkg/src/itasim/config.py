"""Hardware and workload parameters shared by every part of the simulator."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class AcceleratorConfig:
    """
    Design-time parameters of the accelerator.

    Example:
        >>> cfg = AcceleratorConfig()
        >>> cfg.N * cfg.M  # MAC units
        1024
    """

    N: int = 16
    """Number of processing elements (one output column each per cycle)."""

    M: int = 64
    """Dot-product width of a PE, and the tile edge."""

    D: int = 24
    """Accumulator width in bits."""

    B: int = 8
    """Activation / weight width in bits."""

    freq_hz: float = 500e6

    divider_latency_cycles: int = 16
    """Cycles one serial divider needs per inversion (one per quotient bit)."""

    divider_count: int = 2

    fifo_depth: int | None = None
    """Output FIFO depth in bytes; None models a FIFO that never fills."""

    output_drain_bytes_per_cycle: int | None = None
    """Rate at which memory accepts FIFO output; None means N bytes/cycle."""

    def __post_init__(self) -> None:
        for name in ("N", "M", "D", "B", "divider_latency_cycles", "divider_count"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not self.freq_hz > 0:
            raise ValueError(f"freq_hz must be positive, got {self.freq_hz!r}")
        if self.B < 4 or self.B & (self.B - 1):
            raise ValueError(f"B must be a power of two >= 4, got {self.B}")
        if self.D <= 2 * self.B:
            raise ValueError(f"D={self.D} leaves no headroom over 2*B={2 * self.B}")
        if self.fifo_depth is not None and self.fifo_depth < 0:
            raise ValueError("fifo_depth must be >= 0")
        if self.output_drain_bytes_per_cycle is not None and self.output_drain_bytes_per_cycle <= 0:
            raise ValueError("output_drain_bytes_per_cycle must be positive")

    @property
    def acc_min(self) -> int:
        return -(1 << (self.D - 1))

    @property
    def acc_max(self) -> int:
        return (1 << (self.D - 1)) - 1

    @property
    def max_inner_dim(self) -> int:
        """Longest dot product that can never overflow the accumulator.

        Sized for the worst operand pair the datapath sees, an unsigned
        probability (2^B - 1) times a signed code (-2^(B-1)), plus one bias.
        """
        worst_product = ((1 << self.B) - 1) << (self.B - 1)
        return (self.acc_max - (1 << (self.B - 1))) // worst_product

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AttentionDims:
    """Workload shape: sequence S, embedding E, projection P, heads H."""

    S: int
    E: int
    P: int
    H: int = 1

    def __post_init__(self) -> None:
        for name in ("S", "E", "P", "H"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @classmethod
    def parse(cls, text: str) -> "AttentionDims":
        """Parse ``"SxExPxH"`` (``H`` optional), e.g. ``"64x64x64x1"``."""
        parts = text.lower().split("x")
        if len(parts) not in (3, 4):
            raise ValueError(f"dims must look like SxExP[xH], got {text!r}")
        try:
            values = [int(p) for p in parts]
        except ValueError:
            raise ValueError(f"dims must be integers, got {text!r}") from None
        return cls(*values)

    def __str__(self) -> str:
        return f"{self.S}x{self.E}x{self.P}x{self.H}"

    def to_dict(self) -> dict:
        return asdict(self)
