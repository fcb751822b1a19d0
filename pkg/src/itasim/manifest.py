"""Weight-set manifests: an INI file naming tensor files and requant parameters.

Example::

    [attention]
    S = 64
    E = 64
    P = 64
    H = 1
    seed = 7
    logit_scale = 0.125
    input = x.itaq

    [head0]
    wq = head0_wq.itaq
    bq = head0_bq.itaq
    ...
    requant_q = 181 14 0.0123

    [output]
    wo = wo.itaq
    bo = bo.itaq
    requant = 97 13 0.0311

A requant entry is ``multiplier right_shift output_scale``; scales are written
with ``repr`` so they round-trip exactly.  Biases are 1 x n int8 tensors.
"""

from __future__ import annotations

import configparser
from pathlib import Path

import numpy as np

from . import tensorio
from .attention import HEAD_STEPS, HeadWeights, ShapeError, WeightSet
from .config import AttentionDims
from .quant import QuantizedMatrix, RequantParams


class ManifestError(ValueError):
    pass


def _format_requant(p: RequantParams) -> str:
    return f"{p.multiplier} {p.right_shift} {p.output_scale!r}"


def _parse_requant(text: str, where: str) -> RequantParams:
    try:
        mult, shift, scale = text.split()
        return RequantParams(int(mult), int(shift), float(scale))
    except ValueError as exc:
        raise ManifestError(f"{where}: bad requant entry {text!r} ({exc})") from None


def write_manifest(
    directory,
    x: QuantizedMatrix,
    w: WeightSet,
    dims: AttentionDims,
    seed: int | None = None,
    name: str = "manifest.ini",
) -> Path:
    """Write every tensor plus the manifest into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser()
    cp["attention"] = {"S": str(dims.S), "E": str(dims.E), "P": str(dims.P), "H": str(dims.H),
                       "logit_scale": repr(w.logit_scale), "input": "x.itaq"}
    if seed is not None:
        cp["attention"]["seed"] = str(seed)
    tensorio.save_quantized(directory / "x.itaq", x)
    for h, head in enumerate(w.heads):
        sec = {}
        for name_ in ("q", "k", "v"):
            wm = getattr(head, "w" + name_)
            wfile, bfile = f"head{h}_w{name_}.itaq", f"head{h}_b{name_}.itaq"
            tensorio.save_quantized(directory / wfile, wm)
            bias = QuantizedMatrix(getattr(head, "b" + name_)[None, :], x.scale * wm.scale)
            tensorio.save_quantized(directory / bfile, bias)
            sec["w" + name_], sec["b" + name_] = wfile, bfile
        for step in HEAD_STEPS:
            sec[f"requant_{step}"] = _format_requant(head.requant[step])
        cp[f"head{h}"] = sec
    tensorio.save_quantized(directory / "wo.itaq", w.wo)
    bo_scale = w.heads[0].requant["av"].output_scale * w.wo.scale
    tensorio.save_quantized(directory / "bo.itaq", QuantizedMatrix(w.bo[None, :], bo_scale))
    cp["output"] = {"wo": "wo.itaq", "bo": "bo.itaq", "requant": _format_requant(w.out_requant)}
    path = directory / name
    with open(path, "w") as fh:
        cp.write(fh)
    return path


_ATTENTION_KEYS = {"s", "e", "p", "h", "seed", "logit_scale", "input"}
_HEAD_KEYS = {"wq", "wk", "wv", "bq", "bk", "bv"} | {f"requant_{s}" for s in HEAD_STEPS}
_OUTPUT_KEYS = {"wo", "bo", "requant"}


def _check_keys(cp, section: str, allowed: set[str]) -> None:
    if not cp.has_section(section):
        raise ManifestError(f"missing section [{section}]")
    keys = set(cp[section])
    unknown = keys - allowed
    if unknown:
        raise ManifestError(f"[{section}]: unknown keys {sorted(unknown)}")
    missing = allowed - keys - {"seed"}
    if missing:
        raise ManifestError(f"[{section}]: missing keys {sorted(missing)}")


def load_manifest(path) -> tuple[QuantizedMatrix, WeightSet, AttentionDims, dict]:
    """Load and validate a manifest; returns ``(x, weights, dims, attention section)``.

    Shape problems raise :class:`ShapeError` naming the offending tensor.
    """
    path = Path(path)
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    _check_keys(cp, "attention", _ATTENTION_KEYS)
    att = cp["attention"]
    try:
        dims = AttentionDims(att.getint("S"), att.getint("E"), att.getint("P"), att.getint("H"))
    except ValueError as exc:
        raise ManifestError(f"[attention]: {exc}") from None
    root = path.parent

    def tensor(rel: str, label: str, shape) -> QuantizedMatrix:
        try:
            q = tensorio.load_quantized(root / rel)
        except FileNotFoundError:
            raise FileNotFoundError(f"{label}: tensor file {root / rel} not found") from None
        if q.shape != tuple(shape):
            raise ShapeError(label, shape, q.shape)
        return q

    x = tensor(att["input"], "input", (dims.S, dims.E))
    heads = []
    for h in range(dims.H):
        sec_name = f"head{h}"
        _check_keys(cp, sec_name, _HEAD_KEYS)
        sec = cp[sec_name]
        ws = {n: tensor(sec["w" + n], f"{sec_name}.w{n}", (dims.E, dims.P)) for n in "qkv"}
        bs = {n: tensor(sec["b" + n], f"{sec_name}.b{n}", (1, dims.P)).codes[0] for n in "qkv"}
        rq = {s: _parse_requant(sec[f"requant_{s}"], f"[{sec_name}] requant_{s}") for s in HEAD_STEPS}
        heads.append(HeadWeights(ws["q"], ws["k"], ws["v"], bs["q"], bs["k"], bs["v"], rq))
    extra = sorted(s for s in cp.sections() if s.startswith("head") and s not in {f"head{h}" for h in range(dims.H)})
    if extra:
        raise ManifestError(f"sections {extra} exceed H={dims.H}")
    _check_keys(cp, "output", _OUTPUT_KEYS)
    out = cp["output"]
    wo = tensor(out["wo"], "output.wo", (dims.H * dims.P, dims.E))
    bo = tensor(out["bo"], "output.bo", (1, dims.E)).codes[0]
    w = WeightSet(heads, wo, np.asarray(bo), _parse_requant(out["requant"], "[output] requant"),
                  float(att["logit_scale"]))
    w.validate(dims)
    return x, w, dims, dict(att)
