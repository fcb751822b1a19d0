"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data error, 2 usage or validation error.
Every subcommand validates its inputs and computes all results before it
writes any file.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

from . import tensorio
from .attention import ShapeError, multi_head_attention
from .config import AcceleratorConfig, AttentionDims
from .harness import Distribution, ExperimentSpec, random_workload, run_equivalence_suite, run_softmax_sweep, write_fixture_set
from .manifest import ManifestError, load_manifest
from .perf import SOFTMAX_MODES, build_schedule, dataflow_comparison, simulate_perf

CONFIG_SECTION = "itasim"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _add_accel_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("accelerator")
    g.add_argument("--n", type=int, help="PE count N (default 16)")
    g.add_argument("--m", type=int, help="dot-product width / tile edge M (default 64)")
    g.add_argument("--d", type=int, help="accumulator bits D (default 24)")
    g.add_argument("--b", type=int, help="activation bits B (default 8)")
    g.add_argument("--freq", type=float, help="clock frequency in Hz (default 500e6)")
    g.add_argument("--divider-latency", type=int, help="serial divider cycles per division (default 16)")
    g.add_argument("--divider-count", type=int, help="number of serial dividers (default 2)")
    g.add_argument("--fifo-depth", type=int, help="output FIFO depth in bytes (default: never fills)")
    g.add_argument("--drain-rate", type=int, help="FIFO drain bytes per cycle (default N)")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with an [itasim] section; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="itasim", description="Integer transformer-attention accelerator simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("softmax-eval", help="integer softmax MAE sweep against the float oracle")
    _common(p)
    p.add_argument("--seed", type=int, help="64-bit generator seed (required)")
    p.add_argument("--rows", type=int, help="number of rows (required)")
    p.add_argument("--len", dest="len", type=int, help="row length (required)")
    p.add_argument("--dist", help="uniform | gaussian:MEAN,SIGMA | peaked:FRACTION (default gaussian:0,40)")
    p.add_argument("--out", type=Path, help="report path (default softmax_report.json)")
    _add_accel_flags(p)

    p = sub.add_parser("attention-run", help="run multi-head attention and report performance")
    _common(p)
    p.add_argument("--manifest", type=Path, help="weight-set manifest")
    p.add_argument("--dims", help="SxExPxH; generate a seeded workload instead of reading a manifest")
    p.add_argument("--seed", type=int, help="seed for --dims workloads (default 0)")
    p.add_argument("--out", type=Path, help="output directory (default attention_out)")
    p.add_argument("--probs", action="store_true", default=None, help="also write per-head probabilities")
    p.add_argument("--no-softmax-overlap", dest="no_softmax_overlap", action="store_true", default=None,
                   help="debug: put denominator inversion on the critical path")
    p.add_argument("--threads", type=int, help="worker threads (default ITA_SIM_THREADS or auto)")
    _add_accel_flags(p)

    p = sub.add_parser("perf-report", help="analytical performance and bandwidth report")
    _common(p)
    p.add_argument("--dims", help="SxExPxH (default 64x64x64x1)")
    p.add_argument("--softmax-mode", choices=SOFTMAX_MODES, help="softmax cost model (default overlap)")
    p.add_argument("--compare-dataflow", action="store_true", default=None,
                   help="print weight- vs output-stationary bandwidth for N in 4, 8, 16, 32")
    p.add_argument("--out", type=Path, help="report path (default: stdout only)")
    _add_accel_flags(p)

    p = sub.add_parser("equivalence", help="run the invariant suite")
    _common(p)
    p.add_argument("--cases", type=int, help="cases per property (default 1000)")
    p.add_argument("--seed", type=int, help="suite seed (default 2023)")
    p.add_argument("--rescale-order", choices=("before-add", "after-add"),
                   help="after-add is a deliberately wrong mutant")
    p.add_argument("--out", type=Path, help="summary path")
    _add_accel_flags(p)

    p = sub.add_parser("make-fixtures", help="regenerate golden fixtures with the naive reference")
    p.add_argument("--out", type=Path, required=True)
    parser.subcommands = sub.choices
    return parser


def _merge_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> dict:
    """Explicit flags override ``--config`` values; unknown config keys are rejected."""
    values = {k: v for k, v in vars(args).items() if v is not None}
    path = values.pop("config", None)
    if path is None:
        return values
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise UsageError(f"config file {path} not found")
    except configparser.Error as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    unknown_sections = set(cp.sections()) - {CONFIG_SECTION}
    if unknown_sections:
        raise UsageError(f"config: unknown sections {sorted(unknown_sections)}")
    if not cp.has_section(CONFIG_SECTION):
        return values
    actions = {a.dest: a for a in parser.subcommands[args.command]._actions}
    for key, raw in cp[CONFIG_SECTION].items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help"):
            raise UsageError(f"config: unknown key {key!r} for {args.command}")
        if dest in values:
            continue
        try:
            if isinstance(action, argparse._StoreTrueAction):
                values[dest] = _bool(raw)
            elif action.type is not None:
                values[dest] = action.type(raw)
            else:
                values[dest] = raw
        except ValueError as exc:
            raise UsageError(f"config: bad value for {key!r}: {exc}") from None
        if action.choices is not None and values[dest] not in action.choices:
            raise UsageError(f"config: {key!r} must be one of {list(action.choices)}")
    return values


def _accel(opts: dict) -> AcceleratorConfig:
    mapping = {"n": "N", "m": "M", "d": "D", "b": "B", "freq": "freq_hz",
               "divider_latency": "divider_latency_cycles", "divider_count": "divider_count",
               "fifo_depth": "fifo_depth", "drain_rate": "output_drain_bytes_per_cycle"}
    kwargs = {field: opts[flag] for flag, field in mapping.items() if flag in opts}
    try:
        return AcceleratorConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dims(text: str) -> AttentionDims:
    try:
        return AttentionDims.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_softmax_eval(opts: dict) -> int:
    missing = [f"--{k}" for k in ("seed", "rows", "len") if k not in opts]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    cfg = _accel(opts)
    try:
        dist = Distribution.parse(opts.get("dist", "gaussian:0,40"))
        spec = ExperimentSpec(opts["seed"], AttentionDims(opts["len"], 1, 1, 1), cfg, dist, opts["rows"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = run_softmax_sweep(spec)
    out = opts.get("out", Path("softmax_report.json"))
    try:
        _write_json(out, report.to_dict())
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from None
    print(f"softmax-eval: rows={spec.repetitions} len={spec.dims.S} dist={dist} "
          f"mae={report.softmax_mae:.6e} max_abs_err={report.softmax_max_abs_err:.6e} -> {out}")
    return 0


def cmd_attention_run(opts: dict) -> int:
    cfg = _accel(opts)
    if ("manifest" in opts) == ("dims" in opts):
        raise UsageError("give exactly one of --manifest or --dims")
    threads = opts.get("threads")
    if threads is not None and threads < 0:
        raise UsageError("--threads must be >= 0")
    if "manifest" in opts:
        try:
            x, w, dims, _ = load_manifest(opts["manifest"])
        except (ShapeError, ManifestError, tensorio.TensorFormatError) as exc:
            raise DataError(f"manifest {opts['manifest']}: {exc}") from None
        except (OSError, configparser.Error) as exc:
            raise DataError(f"manifest {opts['manifest']}: {exc}") from None
    else:
        dims = _dims(opts["dims"])
        x, w = random_workload(dims, opts.get("seed", 0), cfg.B)
    if max(dims.E, dims.S, dims.H * dims.P) > cfg.max_inner_dim:
        raise UsageError(f"dims {dims} exceed the overflow-free dot-product length {cfg.max_inner_dim}")

    try:
        result = multi_head_attention(x, w, cfg, dims, threads=threads)
    except (ShapeError, OverflowError) as exc:
        raise DataError(str(exc)) from None
    mode = "serial" if opts.get("no_softmax_overlap") else "overlap"
    report = simulate_perf(build_schedule(dims, cfg, mode)).to_dict()
    report["softmax_saturated"] = result.softmax_saturated

    out_dir = opts.get("out", Path("attention_out"))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        tensorio.save_quantized(out_dir / "output.itaq", result.output)
        if opts.get("probs"):
            for h, p in enumerate(result.attention_probs):
                tensorio.save_probs(out_dir / f"probs_head{h}.itaq", p)
        _write_json(out_dir / "perf.json", report)
    except OSError as exc:
        raise DataError(f"cannot write outputs to {out_dir}: {exc}") from None
    print(f"attention-run: dims={dims} cycles={report['total_cycles']} "
          f"utilization={report['mac_utilization']:.4f} tops={report['throughput_tops']:.4f} -> {out_dir}")
    for line in report["diagnostics"]:
        print(f"  diagnostic: {line}")
    return 0


def cmd_perf_report(opts: dict) -> int:
    cfg = _accel(opts)
    dims = _dims(opts.get("dims", "64x64x64x1"))
    report = simulate_perf(build_schedule(dims, cfg, opts.get("softmax_mode", "overlap"))).to_dict()
    if opts.get("compare_dataflow"):
        table = dataflow_comparison(cfg=cfg)
        report["dataflow_comparison"] = table
        print(f"{'N':>4} {'M':>4} {'D':>4} {'WS bits/cyc':>12} {'OS bits/cyc':>12} {'OS/WS':>7}")
        for row in table:
            print(f"{row['N']:>4} {row['M']:>4} {row['D']:>4} {row['ws_bits']:>12} {row['os_bits']:>12} {row['ratio']:>7.3f}")
    text = json.dumps(report, indent=2, sort_keys=True)
    if "out" in opts:
        try:
            _write_json(opts["out"], report)
        except OSError as exc:
            raise DataError(f"cannot write {opts['out']}: {exc}") from None
    else:
        print(text)
    print(f"perf-report: ws={report['bandwidth_ws_bits']} os={report['bandwidth_os_bits']} bits/cycle "
          f"tops={report['throughput_tops']:.4f} cycles={report['total_cycles']}")
    return 0


def cmd_equivalence(opts: dict) -> int:
    cfg = _accel(opts)
    cases = opts.get("cases", 1000)
    if cases < 1:
        raise UsageError("--cases must be >= 1")
    summary = run_equivalence_suite(cfg, cases, opts.get("seed", 2023), opts.get("rescale_order", "before-add"))
    failed = 0
    for name, res in summary.items():
        status = "PASS" if res["failures"] == 0 else "FAIL"
        failed += res["failures"]
        seeds = " ".join(str(r["seed"]) for r in res["reproducers"])
        print(f"{status} {name}: {res['failures']}/{res['cases']} failures" + (f" reproducers: {seeds}" if seeds else ""))
    if "out" in opts:
        _write_json(opts["out"], {"schema_version": 1, "properties": summary})
    return 1 if failed else 0


def cmd_make_fixtures(opts: dict) -> int:
    index = write_fixture_set(opts["out"])
    print(f"make-fixtures: wrote {index}")
    return 0


COMMANDS = {
    "softmax-eval": cmd_softmax_eval,
    "attention-run": cmd_attention_run,
    "perf-report": cmd_perf_report,
    "equivalence": cmd_equivalence,
    "make-fixtures": cmd_make_fixtures,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else 2
    try:
        opts = _merge_config(parser, args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"itasim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"itasim {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
