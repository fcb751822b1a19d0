"""Experiment and verification harness.

Everything here is a pure function of its arguments: rows and weights come
from the counter-based generator in :mod:`itasim.rng`, and aggregation uses
only sums and maxima, so chunking or threading never changes a report.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensorio
from .attention import (
    HEAD_STEPS,
    HeadWeights,
    WeightSet,
    attention_head,
    attention_head_unfused,
    calibrate,
    dequantize_weights,
    float_golden_attention,
    multi_head_attention,
    thread_count,
    tiled_matmul_codes,
)
from .config import AcceleratorConfig, AttentionDims
from .manifest import write_manifest
from .quant import QuantizedMatrix, RequantParams, dequantize
from .reference import naive_attention, naive_matmul
from .rng import CounterRNG, derive_seed
from .softmax import (
    RescaleOrder,
    SoftmaxConstants,
    SoftmaxState,
    part_bounds,
    softmax_row_float_oracle,
    softmax_row_integer_oracle,
    streaming_softmax,
)

SCHEMA_VERSION = 1
HISTOGRAM_EDGES = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass(frozen=True)
class Distribution:
    """Row generator: ``uniform``, ``gaussian`` (mean, sigma) or ``peaked`` (fraction)."""

    kind: str = "gaussian"
    mean: float = 0.0
    sigma: float = 40.0
    fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "gaussian", "peaked"):
            raise ValueError(f"unknown distribution {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError("gaussian sigma must be positive")
        if self.kind == "peaked" and not 0.0 <= self.fraction <= 1.0:
            raise ValueError("peaked fraction must be within [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "Distribution":
        """``uniform``, ``gaussian:MEAN,SIGMA`` or ``peaked:FRACTION``."""
        kind, _, args = text.partition(":")
        kind = kind.strip().lower()
        try:
            if kind == "uniform" and not args:
                return cls("uniform")
            if kind == "gaussian":
                if not args:
                    return cls("gaussian")
                mean, sigma = (float(a) for a in args.split(","))
                return cls("gaussian", mean=mean, sigma=sigma)
            if kind == "peaked":
                return cls("peaked", fraction=float(args)) if args else cls("peaked")
        except ValueError as exc:
            raise ValueError(f"bad distribution {text!r}: {exc}") from None
        raise ValueError(f"bad distribution {text!r}")

    def __str__(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian:{self.mean:g},{self.sigma:g}"
        if self.kind == "peaked":
            return f"peaked:{self.fraction:g}"
        return "uniform"

    def sample(self, rng: CounterRNG, shape) -> np.ndarray:
        if self.kind == "uniform":
            return rng.int8(shape)
        if self.kind == "gaussian":
            z = self.mean + self.sigma * rng.normal(shape)
            return np.clip(np.sign(z) * np.floor(np.abs(z) + 0.5), -128, 127).astype(np.int64)
        near = rng.uniform(shape) < self.fraction
        high = rng.integers(96, 127, shape)
        low = rng.integers(-128, 95, shape)
        return np.where(near, high, low)


@dataclass(frozen=True)
class ExperimentSpec:
    seed: int
    dims: AttentionDims
    cfg: AcceleratorConfig = AcceleratorConfig()
    distribution: Distribution = Distribution()
    repetitions: int = 1

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass
class ErrorReport:
    softmax_mae: float
    softmax_max_abs_err: float
    end_to_end_output_mae: float | None
    histogram: dict
    rows: int
    row_length: int
    seed: int
    distribution: str
    saturated_rows: int = 0
    extra: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _histogram(errors: np.ndarray) -> dict:
    counts, _ = np.histogram(errors, bins=HISTOGRAM_EDGES)
    return {"edges": list(HISTOGRAM_EDGES), "counts": [int(c) for c in counts]}


def generate_rows(spec: ExperimentSpec) -> np.ndarray:
    return spec.distribution.sample(CounterRNG(spec.seed), (spec.repetitions, spec.dims.S))


def _sweep_chunk(rows: np.ndarray, cfg: AcceleratorConfig) -> tuple[float, float, np.ndarray, int]:
    constants = SoftmaxConstants(cfg.B)
    state = SoftmaxState(rows.shape[0], constants)
    for lo, hi in part_bounds(rows.shape[1], cfg.M):
        state.da_update_block(rows[:, lo:hi])
    state.di_invert_all()
    out = state.en_normalize_block(rows)
    ref = softmax_row_float_oracle(rows, constants)
    err = np.abs(out / constants.out_max - ref)
    counts, _ = np.histogram(err, bins=HISTOGRAM_EDGES)
    return float(err.sum()), float(err.max()), counts, int(state.saturated.sum())


def run_softmax_sweep(spec: ExperimentSpec, threads: int | None = None, chunk_rows: int = 256) -> ErrorReport:
    """Streaming integer softmax vs the real base-2 softmax over generated rows."""
    rows = generate_rows(spec)
    chunks = [rows[i : i + chunk_rows] for i in range(0, rows.shape[0], chunk_rows)]
    workers = min(thread_count(threads), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _sweep_chunk(c, spec.cfg), chunks))
    else:
        parts = [_sweep_chunk(c, spec.cfg) for c in chunks]
    total = math.fsum(p[0] for p in parts)
    counts = sum(p[2] for p in parts)
    return ErrorReport(
        softmax_mae=total / rows.size,
        softmax_max_abs_err=max(p[1] for p in parts),
        end_to_end_output_mae=None,
        histogram={"edges": list(HISTOGRAM_EDGES), "counts": [int(c) for c in counts]},
        rows=spec.repetitions,
        row_length=spec.dims.S,
        seed=spec.seed,
        distribution=str(spec.distribution),
        saturated_rows=sum(p[3] for p in parts),
    )


# -- workloads and fixtures ---------------------------------------------------

X_SCALE = 1.0 / 32
W_SIGMA = 24.0


def random_workload(dims: AttentionDims, seed: int, B: int = 8) -> tuple[QuantizedMatrix, WeightSet]:
    """Seeded int8 input and weights, with requant steps calibrated on the float model.

    Weight scales shrink with the fan-in so that activations keep a similar
    range from layer to layer.
    """
    rng = CounterRNG(seed)
    gauss = Distribution("gaussian", 0.0, W_SIGMA)
    x = QuantizedMatrix(Distribution("gaussian", 0.0, 40.0).sample(rng, (dims.S, dims.E)), X_SCALE)
    w_scale = 1.0 / (W_SIGMA * math.sqrt(dims.E))
    heads = []
    for _ in range(dims.H):
        hd = {}
        for n in "qkv":
            hd["w" + n] = QuantizedMatrix(gauss.sample(rng, (dims.E, dims.P)), w_scale)
            hd["b" + n] = rng.int8((dims.P,))
        heads.append(hd)
    wo = QuantizedMatrix(gauss.sample(rng, (dims.H * dims.P, dims.E)), 1.0 / (W_SIGMA * math.sqrt(dims.H * dims.P)))
    bo = rng.int8((dims.E,))
    return x, calibrate(x, heads, wo, bo, B)


def run_attention_error(x: QuantizedMatrix, w: WeightSet, dims: AttentionDims,
                        cfg: AcceleratorConfig = AcceleratorConfig(), seed: int = 0) -> ErrorReport:
    """Integer attention vs the float golden model: probability and output errors."""
    result = multi_head_attention(x, w, cfg, dims)
    golden_out, golden_probs, _ = float_golden_attention(dequantize(x), dequantize_weights(w, x.scale), dims)
    errs = np.concatenate([
        np.abs(p.astype(np.float64) / 255.0 - g).ravel()
        for p, g in zip(result.attention_probs, golden_probs)
    ])
    out_err = np.abs(dequantize(result.output) - golden_out)
    return ErrorReport(
        softmax_mae=float(errs.mean()),
        softmax_max_abs_err=float(errs.max()),
        end_to_end_output_mae=float(out_err.mean()),
        histogram=_histogram(errs),
        rows=dims.S * dims.H,
        row_length=dims.S,
        seed=seed,
        distribution="attention",
        saturated_rows=sum(int(np.sum(np.array(b["sum"]) >= (1 << 15) - 1))
                           for h in result.heads for b in h.trace.blocks),
        extra={"output_max_abs_err": float(out_err.max())},
    )


FIXTURES = {
    "s64_e64_p64_h1": (AttentionDims(64, 64, 64, 1), 7),
    "s128_e192_p64_h3": (AttentionDims(128, 192, 64, 3), 11),
}


def write_fixture(directory, dims: AttentionDims, seed: int, cfg: AcceleratorConfig = AcceleratorConfig()) -> Path:
    """Inputs, weights, manifest and naive-reference golden outputs for one workload."""
    directory = Path(directory)
    x, w = random_workload(dims, seed, cfg.B)
    manifest = write_manifest(directory, x, w, dims, seed)
    out, probs = naive_attention(x, w, cfg.M)
    tensorio.save_quantized(directory / "golden_output.itaq", out)
    for h, p in enumerate(probs):
        tensorio.save_probs(directory / f"golden_probs_head{h}.itaq", p)
    return manifest


def write_fixture_set(root, cfg: AcceleratorConfig = AcceleratorConfig()) -> Path:
    root = Path(root)
    entries = {}
    for name, (dims, seed) in FIXTURES.items():
        write_fixture(root / name, dims, seed, cfg)
        entries[name] = {"dims": str(dims), "seed": seed, "part_width": cfg.M}
    index = root / "fixtures.json"
    index.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "fixtures": entries}, indent=2, sort_keys=True) + "\n")
    return index


# -- equivalence suite --------------------------------------------------------


def _random_row(rng: CounterRNG, max_len: int) -> np.ndarray:
    n = rng.integers(1, max_len)
    lo = rng.integers(-128, 127)
    hi = rng.integers(lo, 127)
    return rng.integers(lo, hi, (n,))


def _row_len_cap(cfg: AcceleratorConfig) -> int:
    return min(3 * cfg.M, SoftmaxConstants(cfg.B).max_row_length)


def check_translation_invariance(seed, cfg, rescale_order=RescaleOrder.BEFORE_ADD) -> bool:
    rng = CounterRNG(seed)
    row = _random_row(rng, _row_len_cap(cfg))
    c = rng.integers(-128 - int(row.min()), 127 - int(row.max()))
    a = streaming_softmax(row, cfg.M, SoftmaxConstants(cfg.B), rescale_order)
    b = streaming_softmax(row + c, cfg.M, SoftmaxConstants(cfg.B), rescale_order)
    return bool(np.array_equal(a, b))


def check_monotonicity(seed, cfg, rescale_order=RescaleOrder.BEFORE_ADD) -> bool:
    row = _random_row(CounterRNG(seed), _row_len_cap(cfg))
    out = streaming_softmax(row, cfg.M, SoftmaxConstants(cfg.B), rescale_order)[0]
    order = np.argsort(row, kind="stable")
    return bool(np.all(np.diff(out[order]) >= 0))


def check_sum_lower_bound(seed, cfg, rescale_order=RescaleOrder.BEFORE_ADD) -> bool:
    row = _random_row(CounterRNG(seed), _row_len_cap(cfg))
    constants = SoftmaxConstants(cfg.B)
    state = SoftmaxState(1, constants, rescale_order)
    for lo, hi in part_bounds(row.size, cfg.M):
        state.da_update(0, row[lo:hi])
        if state.sum_buf[0] < constants.unit:
            return False
    return True


def check_output_range(seed, cfg, rescale_order=RescaleOrder.BEFORE_ADD) -> bool:
    row = _random_row(CounterRNG(seed), _row_len_cap(cfg))
    constants = SoftmaxConstants(cfg.B)
    out = streaming_softmax(row, cfg.M, constants, rescale_order)[0]
    in_range = out.min() >= 0 and out.max() <= constants.out_max
    return bool(in_range and out[int(np.argmax(row))] == out.max())


def check_streaming_vs_single_pass(seed, cfg, rescale_order=RescaleOrder.BEFORE_ADD) -> bool:
    """Global max forced into the first part; result must equal the single-pass oracle."""
    rng = CounterRNG(seed)
    row = _random_row(rng, _row_len_cap(cfg))
    first = min(cfg.M, row.size)
    pos = rng.integers(0, first - 1)
    row[pos] = row.max()
    constants = SoftmaxConstants(cfg.B)
    got = streaming_softmax(row, cfg.M, constants, rescale_order)[0]
    return got.tolist() == softmax_row_integer_oracle(row, constants)


def _operand(rng: CounterRNG, shape, kind: str) -> np.ndarray:
    if kind == "extreme":
        return np.where(rng.uniform(shape) < 0.5, -128, 127)
    return rng.int8(shape)


def check_tiled_vs_naive(seed, cfg, rescale_order=None) -> bool:
    rng = CounterRNG(seed)
    cap = min(3 * cfg.M, cfg.max_inner_dim)
    rows, inner, cols = (rng.integers(1, cap) for _ in range(3))
    a = rng.int8((rows, inner))
    b = rng.int8((inner, cols))
    bias = rng.int8((cols,)) if rng.uniform(1)[0] < 0.5 else None
    return bool(np.array_equal(tiled_matmul_codes(a, b, bias, cfg), naive_matmul(a, b, bias)))


def check_overflow_freedom(seed, cfg, rescale_order=None) -> bool:
    """Worst-case operands at inner dimensions up to the bound never overflow."""
    rng = CounterRNG(seed)
    k = cfg.max_inner_dim if rng.uniform(1)[0] < 0.25 else rng.integers(1, cfg.max_inner_dim)
    rows, cols = rng.integers(1, 8), rng.integers(1, 8)
    if rng.uniform(1)[0] < 0.5:
        a = np.full((rows, k), (1 << cfg.B) - 1)  # unsigned probabilities
        b = np.full((k, cols), -(1 << (cfg.B - 1)))
        bias = np.full(cols, -(1 << (cfg.B - 1)))
    else:
        a = _operand(rng, (rows, k), "extreme")
        b = _operand(rng, (k, cols), "extreme")
        bias = rng.int8((cols,))
    try:
        got = tiled_matmul_codes(a, b, bias, cfg)
    except OverflowError:
        return False
    ref = naive_matmul(a, b, bias)
    return bool(np.array_equal(got, ref) and ref.min() >= cfg.acc_min and ref.max() <= cfg.acc_max)


def _random_head(rng: CounterRNG, E: int, P: int) -> HeadWeights:
    def params(shift_lo, shift_hi):
        return RequantParams(rng.integers(1, 255), rng.integers(shift_lo, shift_hi), 1.0)

    rq = {"q": params(10, 14), "k": params(10, 14), "v": params(10, 14),
          "qk": params(9, 13), "av": params(12, 16)}
    mats = [QuantizedMatrix(rng.int8((E, P)), 1.0) for _ in range(3)]
    biases = [rng.int8((P,)) for _ in range(3)]
    return HeadWeights(*mats, *biases, rq)


def check_fused_vs_unfused(seed, cfg, rescale_order=RescaleOrder.BEFORE_ADD) -> bool:
    rng = CounterRNG(seed)
    cap = min(2 * cfg.M + cfg.M // 2, cfg.max_inner_dim)
    S = rng.integers(1, cap)
    E = rng.integers(1, min(cap, 80))
    P = rng.integers(1, min(cap, 80))
    x = QuantizedMatrix(rng.int8((S, E)), 1.0)
    head = _random_head(rng, E, P)
    fused = attention_head(x, head, cfg, rescale_order=rescale_order)
    out, probs = attention_head_unfused(x, head, cfg, rescale_order=rescale_order)
    return bool(np.array_equal(fused.output.codes, out.codes) and np.array_equal(fused.probs, probs))


PROPERTIES: dict[str, Callable] = {
    "translation_invariance": check_translation_invariance,
    "monotonicity": check_monotonicity,
    "sum_lower_bound": check_sum_lower_bound,
    "output_range": check_output_range,
    "streaming_vs_single_pass": check_streaming_vs_single_pass,
    "tiled_vs_naive": check_tiled_vs_naive,
    "fused_vs_unfused": check_fused_vs_unfused,
    "overflow_freedom": check_overflow_freedom,
}


def run_property(name: str, case_seed: int, cfg: AcceleratorConfig = AcceleratorConfig(),
                 rescale_order=RescaleOrder.BEFORE_ADD) -> bool:
    """Re-run one property case, e.g. from a reproducer seed."""
    fn = PROPERTIES[name]
    return fn(case_seed, cfg, RescaleOrder(rescale_order))


def run_equivalence_suite(
    cfg: AcceleratorConfig = AcceleratorConfig(),
    cases: int = 1000,
    seed: int = 2023,
    rescale_order: RescaleOrder | str = RescaleOrder.BEFORE_ADD,
    properties=None,
) -> dict:
    """Run every invariant ``cases`` times; returns per-property counts and reproducer seeds."""
    order = RescaleOrder(rescale_order)
    summary = {}
    for p_index, name in enumerate(properties or PROPERTIES):
        base = derive_seed(seed, p_index)
        failures = []
        for i in range(cases):
            case_seed = derive_seed(base, i)
            try:
                ok = PROPERTIES[name](case_seed, cfg, order)
            except (AssertionError, ValueError, OverflowError, RuntimeError) as exc:
                ok = False
                failures.append({"seed": case_seed, "error": f"{type(exc).__name__}: {exc}"})
                continue
            if not ok:
                failures.append({"seed": case_seed})
        summary[name] = {"cases": cases, "failures": len(failures), "reproducers": failures[:10]}
    return summary
