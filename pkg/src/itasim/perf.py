"""Analytical cycle, traffic and bandwidth model of the tiled attention schedule.

The model is idealized: every PE retires one M-wide dot product per cycle,
memory never stalls, and an M x M tile over one M-slice of the common
dimension takes ``ceil(M / N) * M`` cycles (M/N weight groups, each reused
for M streamed input rows).  Stalls enter only through the softmax divider
check and the optional finite output FIFO.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from .config import AcceleratorConfig, AttentionDims

SCHEMA_VERSION = 1

PHASES = ("projections", "qk", "av", "output_projection")
_PHASE_OF_STEP = {"q": "projections", "k": "projections", "v": "projections",
                  "qk": "qk", "av": "av", "out": "output_projection"}
SOFTMAX_MODES = ("overlap", "serial", "free")


def _param(cfg, name, override):
    if override is not None:
        return override
    if cfg is None:
        raise TypeError(f"need a config or an explicit {name}")
    return getattr(cfg, name)


def bandwidth_weight_stationary(cfg: AcceleratorConfig | None = None, *, N=None, M=None, D=None) -> int:
    """Bits per cycle: M input bytes, N weight, N bias, N output bytes, and N*D psum bits each way."""
    n, m, d = _param(cfg, "N", N), _param(cfg, "M", M), _param(cfg, "D", D)
    return 8 * (m + 3 * n) + 2 * n * d


def bandwidth_output_stationary(cfg: AcceleratorConfig | None = None, *, N=None, M=None, D=None) -> int:
    """Bits per cycle when weights stream every cycle (N*M weight bytes)."""
    n, m, d = _param(cfg, "N", N), _param(cfg, "M", M), _param(cfg, "D", D)
    return 8 * (n * m + 3 * n) + 2 * n * d


def weight_buffer_size(cfg: AcceleratorConfig | None = None, *, N=None, M=None) -> int:
    """Bytes of the double-buffered weight buffer."""
    return 2 * _param(cfg, "N", N) * _param(cfg, "M", M)


def interface_bytes_per_cycle(cfg: AcceleratorConfig) -> dict[str, float]:
    """Per-cycle traffic of each interface under the weight-stationary flow."""
    psum = cfg.N * cfg.D / 8
    return {
        "input": float(cfg.M),
        "weight": float(cfg.N),
        "bias": float(cfg.N),
        "output": float(cfg.N),
        "psum_read": psum,
        "psum_write": psum,
    }


def peak_tops(cfg: AcceleratorConfig) -> float:
    return 2 * cfg.N * cfg.M * cfg.freq_hz / 1e12


@dataclass(frozen=True)
class TileOp:
    """One scheduled unit of work.

    Matmul ops cover one output tile over one M-slice of the common dimension.
    ``di`` ops stand for inverting the denominators of one block of rows and
    carry no PE cycles of their own.
    """

    phase: str
    step: str
    head: int
    row_tile: int
    col_tile: int
    l_tile: int
    cycles: int
    useful_macs: int = 0
    padded: bool = False
    softmax: str = ""
    """"DA" on the final Q x K^T slice, "EN" on A x V slices, "DI" on inversions."""
    rows: int = 0
    """Rows inverted (``di`` ops only)."""


@dataclass
class TileSchedule:
    dims: AttentionDims
    cfg: AcceleratorConfig
    ops: list[TileOp]
    softmax_mode: str = "overlap"

    def coverage(self) -> dict[tuple, list[int]]:
        """Map each output tile ``(step, head, row, col)`` to the L-slices that touched it."""
        seen: dict[tuple, list[int]] = defaultdict(list)
        for op in self.ops:
            if op.step != "di":
                seen[(op.step, op.head, op.row_tile, op.col_tile)].append(op.l_tile)
        return dict(seen)


def _tiles(n: int, m: int) -> list[int]:
    return [min(m, n - start) for start in range(0, n, m)]


def _matmul_ops(phase, step, head, rows, cols, inner, cfg, row_tile=None, softmax="") -> list[TileOp]:
    m = cfg.M
    cycles = math.ceil(m / cfg.N) * m
    row_sizes = _tiles(rows, m)
    col_sizes, l_sizes = _tiles(cols, m), _tiles(inner, m)
    ops = []
    for r, rs in enumerate(row_sizes):
        for c, cs in enumerate(col_sizes):
            for l, ls in enumerate(l_sizes):
                tag = softmax
                if softmax == "DA" and l != len(l_sizes) - 1:
                    tag = ""
                ops.append(TileOp(
                    phase=phase, step=step, head=head,
                    row_tile=r if row_tile is None else row_tile, col_tile=c, l_tile=l,
                    cycles=cycles, useful_macs=rs * cs * ls,
                    padded=(rs, cs, ls) != (m, m, m), softmax=tag,
                ))
    return ops


def build_schedule(dims: AttentionDims, cfg: AcceleratorConfig = AcceleratorConfig(),
                   softmax_mode: str = "overlap") -> TileSchedule:
    """Ordered tile operations for one attention layer.

    Linear layers run one after another.  Per head and per block of M query
    rows, the Q x K^T tiles (DA on the final slice of each) are followed by a
    DI entry and then the A x V tiles (EN on every slice).  The output
    projection closes the layer.  ``softmax_mode`` only affects cost
    accounting in :func:`simulate_perf`.
    """
    if softmax_mode not in SOFTMAX_MODES:
        raise ValueError(f"softmax_mode must be one of {SOFTMAX_MODES}")
    S, E, P, H = dims.S, dims.E, dims.P, dims.H
    ops: list[TileOp] = []
    for h in range(H):
        for step in ("q", "k", "v"):
            ops += _matmul_ops("projection", step, h, S, P, E, cfg)
    for h in range(H):
        for i, rows in enumerate(_tiles(S, cfg.M)):
            ops += _matmul_ops("qk_da", "qk", h, rows, S, P, cfg, row_tile=i, softmax="DA")
            ops.append(TileOp(phase="di", step="di", head=h, row_tile=i, col_tile=-1, l_tile=-1,
                              cycles=0, softmax="DI", rows=rows))
            ops += _matmul_ops("av_en", "av", h, rows, P, S, cfg, row_tile=i, softmax="EN")
    ops += _matmul_ops("output_projection", "out", 0, S, E, H * P, cfg)
    return TileSchedule(dims, cfg, ops, softmax_mode)


@dataclass
class PerfReport:
    config: dict
    dims: dict
    softmax_mode: str
    total_cycles: int
    cycles_per_phase: dict[str, int]
    softmax_stall_cycles: int
    fifo_stall_cycles: int
    mac_utilization: float
    throughput_tops: float
    peak_tops: float
    useful_macs: int
    tile_ops: int
    padded_tile_ops: int
    traffic: dict[str, dict[str, float]]
    traffic_total: dict[str, float]
    bandwidth_ws_bits: int
    bandwidth_os_bits: int
    weight_buffer_bytes: int
    weight_interface_bytes_per_cycle: int
    divider: dict
    diagnostics: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _divider_demand(rows: int, cfg: AcceleratorConfig) -> int:
    return math.ceil(rows / cfg.divider_count) * cfg.divider_latency_cycles


def simulate_perf(schedule: TileSchedule) -> PerfReport:
    """Aggregate a schedule into cycles, utilization, throughput and traffic.

    With ``softmax_mode="overlap"`` each block's inversions run on the serial
    dividers while the softmax unit streams that block: denominators finish
    progressively during DA and are consumed progressively during EN.  The
    check is a throughput bound: the dividers must retire the block's rows
    within the block's DA span plus its EN span.  Any excess becomes stall
    cycles and a diagnostic.  ``"serial"`` puts every inversion on the
    critical path; ``"free"`` charges nothing.
    """
    ops = schedule.ops
    if not ops:
        raise ValueError("empty schedule")
    cfg = schedule.cfg
    mode = schedule.softmax_mode

    cycles_per_phase = dict.fromkeys(PHASES, 0)
    useful = 0
    padded = 0
    span: dict[tuple[int, int], int] = defaultdict(int)
    for op in ops:
        if op.step == "di":
            continue
        cycles_per_phase[_PHASE_OF_STEP[op.step]] += op.cycles
        useful += op.useful_macs
        padded += op.padded
        if op.step in ("qk", "av"):
            span[(op.head, op.row_tile)] += op.cycles

    diagnostics = []
    softmax_stall = 0
    blocks = []
    for op in ops:
        if op.step != "di":
            continue
        demand = _divider_demand(op.rows, cfg)
        window = span[(op.head, op.row_tile)]
        if mode == "free":
            stall = 0
        elif mode == "serial":
            stall = demand
        else:
            stall = max(0, demand - window)
            if stall:
                diagnostics.append(
                    f"divider overlap violated: head {op.head} block {op.row_tile} needs "
                    f"{demand} divider cycles but only {window} overlap; {stall} stall cycles added"
                )
        softmax_stall += stall
        blocks.append({"head": op.head, "block": op.row_tile, "rows": op.rows,
                       "demand_cycles": demand, "window_cycles": window, "stall_cycles": stall})

    compute_cycles = sum(cycles_per_phase.values())
    per_cycle = interface_bytes_per_cycle(cfg)
    traffic = {phase: {k: v * cycles_per_phase[phase] for k, v in per_cycle.items()} for phase in PHASES}
    traffic_total = {k: sum(traffic[p][k] for p in PHASES) for k in per_cycle}

    fifo_stall = 0
    if cfg.fifo_depth is not None:
        drain = cfg.output_drain_bytes_per_cycle or cfg.N
        backlog = traffic_total["output"] - drain * compute_cycles - cfg.fifo_depth
        if backlog > 0:
            fifo_stall = math.ceil(backlog / drain)
            diagnostics.append(f"output FIFO full: {fifo_stall} stall cycles added")

    total = compute_cycles + softmax_stall + fifo_stall
    utilization = useful / (cfg.N * cfg.M * total)
    return PerfReport(
        config=cfg.to_dict(),
        dims=schedule.dims.to_dict(),
        softmax_mode=mode,
        total_cycles=total,
        cycles_per_phase=cycles_per_phase,
        softmax_stall_cycles=softmax_stall,
        fifo_stall_cycles=fifo_stall,
        mac_utilization=utilization,
        throughput_tops=2 * cfg.N * cfg.M * cfg.freq_hz * utilization / 1e12,
        peak_tops=peak_tops(cfg),
        useful_macs=useful,
        tile_ops=sum(op.step != "di" for op in ops),
        padded_tile_ops=padded,
        traffic=traffic,
        traffic_total=traffic_total,
        bandwidth_ws_bits=bandwidth_weight_stationary(cfg),
        bandwidth_os_bits=bandwidth_output_stationary(cfg),
        weight_buffer_bytes=weight_buffer_size(cfg),
        weight_interface_bytes_per_cycle=cfg.N,
        divider={"count": cfg.divider_count, "latency_cycles": cfg.divider_latency_cycles,
                 "blocks": blocks},
        diagnostics=diagnostics,
    )


def dataflow_comparison(Ns=(4, 8, 16, 32), cfg: AcceleratorConfig = AcceleratorConfig()) -> list[dict]:
    """Weight- vs output-stationary bandwidth across PE counts, other parameters fixed."""
    rows = []
    for n in Ns:
        ws = bandwidth_weight_stationary(cfg, N=n)
        os_ = bandwidth_output_stationary(cfg, N=n)
        rows.append({"N": n, "M": cfg.M, "D": cfg.D, "ws_bits": ws, "os_bits": os_,
                     "ratio": os_ / ws, "ws_weight_buffer_bytes": weight_buffer_size(cfg, N=n),
                     "os_input_buffer_bytes": 2 * cfg.M})
    return rows
