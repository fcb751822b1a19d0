"""Bit-accurate functional model of quantized multi-head attention.

The datapath mirrors the accelerator: int8 operands, D-bit accumulation over
M x M tiles (zero-padded at the edges), a bias added once per output, and a
requantization back to int8.  Q x K^T and A x V of one head are fused per
block of M query rows: the softmax accumulates denominators while the block's
attention tiles are produced, inverts them, and normalizes the stored int8
attention codes on the fly while they are streamed into A x V.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import AcceleratorConfig, AttentionDims
from .quant import AccumMatrix, QuantizedMatrix, RequantParams, dequantize, requantize, scale_for_range
from .softmax import RescaleOrder, SoftmaxConstants, SoftmaxState, streaming_softmax

HEAD_STEPS = ("q", "k", "v", "qk", "av")


class ShapeError(ValueError):
    """A tensor does not match the workload dimensions."""

    def __init__(self, tensor: str, expected, actual):
        super().__init__(f"{tensor}: expected shape {tuple(expected)}, got {tuple(actual)}")
        self.tensor = tensor


@dataclass
class HeadWeights:
    wq: QuantizedMatrix
    wk: QuantizedMatrix
    wv: QuantizedMatrix
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    requant: dict[str, RequantParams]

    def __post_init__(self) -> None:
        for name in ("bq", "bk", "bv"):
            setattr(self, name, _bias_codes(getattr(self, name), name))
        missing = set(HEAD_STEPS) - set(self.requant)
        if missing:
            raise ValueError(f"missing requant params for steps {sorted(missing)}")


@dataclass
class WeightSet:
    heads: list[HeadWeights]
    wo: QuantizedMatrix
    bo: np.ndarray
    out_requant: RequantParams
    logit_scale: float = 1.0
    """Real factor applied to Q K^T before softmax (typically 1/sqrt(P))."""

    def __post_init__(self) -> None:
        self.bo = _bias_codes(self.bo, "bo")

    def validate(self, dims: AttentionDims) -> None:
        if len(self.heads) != dims.H:
            raise ValueError(f"expected {dims.H} heads, got {len(self.heads)}")
        for h, head in enumerate(self.heads):
            for name in ("wq", "wk", "wv"):
                _expect_shape(f"head{h}.{name}", getattr(head, name).shape, (dims.E, dims.P))
            for name in ("bq", "bk", "bv"):
                _expect_shape(f"head{h}.{name}", getattr(head, name).shape, (dims.P,))
        _expect_shape("wo", self.wo.shape, (dims.H * dims.P, dims.E))
        _expect_shape("bo", self.bo.shape, (dims.E,))
        scales = {head.requant["av"].output_scale for head in self.heads}
        if len(scales) != 1:
            raise ValueError("all heads must share one A x V output scale to be concatenated")


@dataclass
class SoftmaxTrace:
    """Softmax buffer contents after DI, one entry per block of M query rows."""

    blocks: list[dict] = field(default_factory=list)

    @property
    def saturated(self) -> bool:
        return any(b["saturated"] for b in self.blocks)


@dataclass
class HeadResult:
    output: QuantizedMatrix
    probs: np.ndarray
    trace: SoftmaxTrace
    q: QuantizedMatrix
    k: QuantizedMatrix
    v: QuantizedMatrix
    scores: np.ndarray
    """Requantized int8 attention codes (the A scratch buffer)."""


@dataclass
class AttentionOutput:
    output: QuantizedMatrix
    attention_probs: list[np.ndarray]
    heads: list[HeadResult]

    @property
    def softmax_saturated(self) -> bool:
        return any(h.trace.saturated for h in self.heads)


def _bias_codes(bias, name: str) -> np.ndarray:
    arr = np.asarray(bias, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < -128 or arr.max() > 127):
        raise ValueError(f"{name}: biases must be int8 codes")
    return arr


def _expect_shape(name: str, actual, expected) -> None:
    if tuple(actual) != tuple(expected):
        raise ShapeError(name, expected, actual)


def _pad_to(a: np.ndarray, rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols), dtype=np.int64)
    out[: a.shape[0], : a.shape[1]] = a
    return out


def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def tiled_matmul_codes(a, b, bias=None, cfg: AcceleratorConfig = AcceleratorConfig()) -> np.ndarray:
    """Integer ``a @ b (+ bias)`` computed M x M tile by tile with D-bit checks.

    Outer loops walk output tiles, the inner loop walks the common dimension,
    accumulating partial sums the way the PE adders do.  Edge tiles are
    zero-padded.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    rows, inner = a.shape
    cols = b.shape[1]
    if inner > cfg.max_inner_dim:
        raise ValueError(
            f"inner dimension {inner} exceeds overflow-free bound {cfg.max_inner_dim} for D={cfg.D}"
        )
    m = cfg.M
    ap = _pad_to(a, _ceil_to(rows, m), _ceil_to(inner, m))
    bp = _pad_to(b, _ceil_to(inner, m), _ceil_to(cols, m))
    acc = np.zeros((ap.shape[0], bp.shape[1]), dtype=np.int64)
    for r in range(0, ap.shape[0], m):
        for c in range(0, bp.shape[1], m):
            part = np.zeros((m, m), dtype=np.int64)
            for l in range(0, ap.shape[1], m):
                part += ap[r : r + m, l : l + m] @ bp[l : l + m, c : c + m]
                if part.min() < cfg.acc_min or part.max() > cfg.acc_max:
                    raise OverflowError("partial sum left the accumulator range")
            acc[r : r + m, c : c + m] = part
    acc = acc[:rows, :cols]
    if bias is not None:
        bias = _bias_codes(bias, "bias")
        if bias.shape != (cols,):
            raise ValueError(f"bias length {bias.shape[0]} != output columns {cols}")
        acc = acc + bias[None, :]
    if acc.size and (acc.min() < cfg.acc_min or acc.max() > cfg.acc_max):
        raise OverflowError("biased output left the accumulator range")
    return acc


def tiled_matmul(
    a: QuantizedMatrix, b: QuantizedMatrix, bias=None, cfg: AcceleratorConfig = AcceleratorConfig()
) -> AccumMatrix:
    values = tiled_matmul_codes(a.codes, b.codes, bias, cfg)
    return AccumMatrix(values, bits=cfg.D, scale=a.scale * b.scale)


def _project(x: QuantizedMatrix, w: QuantizedMatrix, bias, params: RequantParams, cfg) -> QuantizedMatrix:
    acc = tiled_matmul_codes(x.codes, w.codes, bias, cfg)
    return QuantizedMatrix(requantize(acc, params), params.output_scale)


def attention_head(
    x: QuantizedMatrix,
    head: HeadWeights,
    cfg: AcceleratorConfig = AcceleratorConfig(),
    dims: AttentionDims | None = None,
    rescale_order: RescaleOrder | str = RescaleOrder.BEFORE_ADD,
) -> HeadResult:
    """One attention head under the fused Q x K^T / softmax / A x V schedule."""
    if dims is not None:
        _expect_shape("x", x.shape, (dims.S, dims.E))
    q = _project(x, head.wq, head.bq, head.requant["q"], cfg)
    k = _project(x, head.wk, head.bk, head.requant["k"], cfg)
    v = _project(x, head.wv, head.bv, head.requant["v"], cfg)

    seq = x.rows
    m = cfg.M
    qk, av = head.requant["qk"], head.requant["av"]
    constants = SoftmaxConstants(cfg.B)
    state = SoftmaxState(m, constants, rescale_order)
    scratch = np.zeros((seq, seq), dtype=np.int64)
    probs = np.zeros((seq, seq), dtype=np.int64)
    out = np.zeros((seq, v.cols), dtype=np.int64)
    trace = SoftmaxTrace()
    kt = k.codes.T

    for r0 in range(0, seq, m):
        r1 = min(r0 + m, seq)
        state.reset()
        # Q x K^T with DA on every finished tile; parts follow tile columns.
        for c0 in range(0, seq, m):
            c1 = min(c0 + m, seq)
            tile = requantize(tiled_matmul_codes(q.codes[r0:r1], kt[:, c0:c1], None, cfg), qk)
            scratch[r0:r1, c0:c1] = tile
            state.da_update_block(tile)
        state.di_invert_all()
        trace.blocks.append({"rows": [r0, r1], **state.snapshot()})
        # A x V, with EN applied as each attention tile is read back.
        acc = np.zeros((r1 - r0, v.cols), dtype=np.int64)
        for l0 in range(0, seq, m):
            l1 = min(l0 + m, seq)
            p = state.en_normalize_block(scratch[r0:r1, l0:l1])
            probs[r0:r1, l0:l1] = p
            acc += tiled_matmul_codes(p, v.codes[l0:l1], None, cfg)
            if acc.min() < cfg.acc_min or acc.max() > cfg.acc_max:
                raise OverflowError("A x V partial sum left the accumulator range")
        out[r0:r1] = requantize(acc, av)

    return HeadResult(
        output=QuantizedMatrix(out, av.output_scale),
        probs=probs.astype(np.uint8),
        trace=trace,
        q=q,
        k=k,
        v=v,
        scores=scratch,
    )


def attention_head_unfused(
    x: QuantizedMatrix,
    head: HeadWeights,
    cfg: AcceleratorConfig = AcceleratorConfig(),
    rescale_order: RescaleOrder | str = RescaleOrder.BEFORE_ADD,
) -> tuple[QuantizedMatrix, np.ndarray]:
    """Same head computed phase by phase: full Q x K^T, softmax, then A x V."""
    q = _project(x, head.wq, head.bq, head.requant["q"], cfg)
    k = _project(x, head.wk, head.bk, head.requant["k"], cfg)
    v = _project(x, head.wv, head.bv, head.requant["v"], cfg)
    scores = requantize(tiled_matmul_codes(q.codes, k.codes.T, None, cfg), head.requant["qk"])
    probs = streaming_softmax(scores, cfg.M, SoftmaxConstants(cfg.B), rescale_order)
    av = head.requant["av"]
    out = requantize(tiled_matmul_codes(probs, v.codes, None, cfg), av)
    return QuantizedMatrix(out, av.output_scale), probs.astype(np.uint8)


def thread_count(threads: int | None = None) -> int:
    """Worker count: explicit argument, else ``ITA_SIM_THREADS``, else CPU count."""
    if threads is None:
        raw = os.environ.get("ITA_SIM_THREADS", "0").strip() or "0"
        try:
            threads = int(raw)
        except ValueError:
            raise ValueError(f"ITA_SIM_THREADS must be an integer, got {raw!r}") from None
    if threads < 0:
        raise ValueError("thread count must be >= 0")
    return threads or (os.cpu_count() or 1)


def multi_head_attention(
    x: QuantizedMatrix,
    w: WeightSet,
    cfg: AcceleratorConfig = AcceleratorConfig(),
    dims: AttentionDims | None = None,
    threads: int | None = None,
) -> AttentionOutput:
    """All heads, concatenated along features, then the output projection."""
    if dims is None:
        dims = AttentionDims(x.rows, x.cols, w.heads[0].wq.cols, len(w.heads))
    _expect_shape("x", x.shape, (dims.S, dims.E))
    w.validate(dims)

    workers = min(thread_count(threads), dims.H)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda h: attention_head(x, h, cfg, dims), w.heads))
    else:
        results = [attention_head(x, h, cfg, dims) for h in w.heads]

    concat = np.concatenate([r.output.codes for r in results], axis=1)
    acc = tiled_matmul_codes(concat, w.wo.codes, w.bo, cfg)
    output = QuantizedMatrix(requantize(acc, w.out_requant), w.out_requant.output_scale)
    return AttentionOutput(output, [r.probs for r in results], results)


# -- float golden model ------------------------------------------------------


@dataclass
class FloatWeights:
    wq: list[np.ndarray]
    wk: list[np.ndarray]
    wv: list[np.ndarray]
    bq: list[np.ndarray]
    bk: list[np.ndarray]
    bv: list[np.ndarray]
    wo: np.ndarray
    bo: np.ndarray
    logit_scale: float


def dequantize_weights(w: WeightSet, x_scale: float) -> FloatWeights:
    """Real-valued weights; a bias code is worth one accumulator LSB."""
    fw = FloatWeights([], [], [], [], [], [], dequantize(w.wo), None, w.logit_scale)
    for head in w.heads:
        for name in ("q", "k", "v"):
            wm = getattr(head, "w" + name)
            getattr(fw, "w" + name).append(dequantize(wm))
            getattr(fw, "b" + name).append(getattr(head, "b" + name) * (x_scale * wm.scale))
    concat_scale = w.heads[0].requant["av"].output_scale
    fw.bo = w.bo * (concat_scale * w.wo.scale)
    return fw


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def float_golden_attention(x: np.ndarray, fw: FloatWeights, dims: AttentionDims | None = None):
    """Real-arithmetic attention with an exact base-e softmax.

    Returns ``(output, per-head probabilities, per-head intermediates)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if dims is not None:
        _expect_shape("x", x.shape, (dims.S, dims.E))
    probs, heads, parts = [], [], []
    for h in range(len(fw.wq)):
        q = x @ fw.wq[h] + fw.bq[h]
        k = x @ fw.wk[h] + fw.bk[h]
        v = x @ fw.wv[h] + fw.bv[h]
        logits = (q @ k.T) * fw.logit_scale
        p = _softmax(logits)
        o = p @ v
        probs.append(p)
        heads.append(o)
        parts.append({"q": q, "k": k, "v": v, "logits": logits, "out": o})
    out = np.concatenate(heads, axis=1) @ fw.wo + fw.bo
    return out, probs, parts


def calibrate(
    x: QuantizedMatrix,
    heads: list[dict],
    wo: QuantizedMatrix,
    bo,
    B: int = 8,
    logit_scale: float | None = None,
) -> WeightSet:
    """Build a :class:`WeightSet` whose requant steps fit the float model's ranges.

    ``heads`` holds dicts with ``wq wk wv`` matrices and ``bq bk bv`` codes.
    Each requant output scale maps the golden model's dynamic range onto
    [-127, 127]; the Q x K^T step instead targets the softmax input scale so
    that codes feed the integer softmax directly (out-of-range logits clip).
    """
    P = heads[0]["wq"].cols
    if logit_scale is None:
        logit_scale = 1.0 / math.sqrt(P)
    softmax_scale = SoftmaxConstants(B).input_scale
    prob_scale = 1.0 / ((1 << B) - 1)

    provisional = []
    for hd in heads:
        provisional.append(
            HeadWeights(
                hd["wq"], hd["wk"], hd["wv"], hd["bq"], hd["bk"], hd["bv"],
                {s: RequantParams.unit() for s in HEAD_STEPS},
            )
        )
    ws = WeightSet(provisional, wo, bo, RequantParams.unit(), logit_scale)
    fw = dequantize_weights(ws, x.scale)
    _, _, parts = float_golden_attention(dequantize(x), fw)

    av_scale = scale_for_range(max(np.abs(p["out"]).max() for p in parts), B)
    for head, part in zip(provisional, parts):
        rq = {}
        for name in ("q", "k", "v"):
            out_scale = scale_for_range(np.abs(part[name]).max(), B)
            ratio = x.scale * getattr(head, "w" + name).scale / out_scale
            rq[name] = RequantParams.from_ratio(ratio, out_scale)
        rq["qk"] = RequantParams.from_ratio(
            rq["q"].output_scale * rq["k"].output_scale * logit_scale / softmax_scale, softmax_scale
        )
        rq["av"] = RequantParams.from_ratio(prob_scale * rq["v"].output_scale / av_scale, av_scale)
        head.requant = rq

    fw = dequantize_weights(ws, x.scale)
    out, _, _ = float_golden_attention(dequantize(x), fw)
    out_scale = scale_for_range(np.abs(out).max(), B)
    ws.out_requant = RequantParams.from_ratio(av_scale * wo.scale / out_scale, out_scale)
    return ws
