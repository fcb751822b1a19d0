"""Naive integer reference for golden outputs.

Deliberately shares no arithmetic with the engine: matmuls are untiled,
rounding uses ``divmod`` on Python ints, and the streaming softmax is a
plain per-row loop.  Only the container types are shared.
"""

from __future__ import annotations

import numpy as np

from .attention import WeightSet
from .quant import QuantizedMatrix, RequantParams


def naive_matmul(a, b, bias=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    out = a @ b
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.int64)[None, :]
    return out


def _round_div_pow2(value: int, shift: int) -> int:
    """``value / 2**shift`` rounded half away from zero."""
    if shift == 0:
        return value
    q, r = divmod(abs(value), 1 << shift)
    if 2 * r >= (1 << shift):
        q += 1
    return q if value >= 0 else -q


def naive_requantize(acc, params: RequantParams) -> np.ndarray:
    flat = [
        max(-128, min(127, _round_div_pow2(int(v) * params.multiplier, params.right_shift)))
        for v in np.asarray(acc).ravel()
    ]
    return np.array(flat, dtype=np.int64).reshape(np.shape(acc))


def naive_streaming_softmax_row(row, part_width: int) -> list[int]:
    """Streaming softmax for B=8 over consecutive parts of ``part_width`` codes."""
    row = [int(v) for v in row]
    cur_max = None
    total = 0
    for start in range(0, len(row), part_width):
        part = row[start : start + part_width]
        new_max = max(part) if cur_max is None else max(cur_max, max(part))
        if cur_max is not None:
            total = total // 2 ** ((new_max - cur_max) // 32)
        for x in part:
            total += 128 // 2 ** ((new_max - x) // 32)
        total = min(total, 2**15 - 1)
        cur_max = new_max
    inverse = (255 * 128) // total
    return [inverse // 2 ** ((cur_max - x) // 32) for x in row]


def naive_attention(x: QuantizedMatrix, w: WeightSet, part_width: int = 64) -> tuple[QuantizedMatrix, list[np.ndarray]]:
    """Whole-matrix multi-head attention; returns output and per-head probabilities."""
    head_outs, probs = [], []
    for head in w.heads:
        rq = head.requant
        q = naive_requantize(naive_matmul(x.codes, head.wq.codes, head.bq), rq["q"])
        k = naive_requantize(naive_matmul(x.codes, head.wk.codes, head.bk), rq["k"])
        v = naive_requantize(naive_matmul(x.codes, head.wv.codes, head.bv), rq["v"])
        scores = naive_requantize(naive_matmul(q, k.T), rq["qk"])
        p = np.array([naive_streaming_softmax_row(r, part_width) for r in scores], dtype=np.int64)
        head_outs.append(naive_requantize(naive_matmul(p, v), rq["av"]))
        probs.append(p.astype(np.uint8))
    concat = np.concatenate(head_outs, axis=1)
    out = naive_requantize(naive_matmul(concat, w.wo.codes, w.bo), w.out_requant)
    return QuantizedMatrix(out, w.out_requant.output_scale), probs
