"""Command-line entry point: ``sleepmod <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error.
Every file written gets a ``<file>.manifest.json`` beside it recording the
command, arguments, seed, input/output hashes and tool version.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, ModelConfig, SleepStage, load_config, reference_config
from .cost import resource_report
from .dsp import (
    BiquadComponents,
    TriggerConfig,
    design_components,
    discretize,
    equal_components,
    pink_noise,
    spectral_slope_db_per_decade,
)
from .loopsim import (
    AfeModel,
    LoopConfig,
    classify_stream,
    fig6_demo,
    run_loop,
    summarize,
)
from .lut import dump_table
from .model import load_engine
from .quant import (
    CalibMethod,
    CalibrationError,
    build_quantized_model,
    calibrate_all,
    calibration_report,
    dump_report,
    params_from_report,
    run_calibration_pass,
)
from .weights import WeightBundle, WeightFormatError, load_bundle, to_bytes

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- file helpers

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_output(path, data: bytes | str, manifest: dict) -> None:
    """Write ``data`` and its manifest beside it."""
    path = Path(path)
    blob = data.encode("utf-8") if isinstance(data, str) else data
    path.write_bytes(blob)
    entry = {**manifest, "output": {"path": path.name, "sha256": hashlib.sha256(blob).hexdigest()}}
    Path(f"{path}.manifest.json").write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")


def make_manifest(args, inputs: dict) -> dict:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    return {
        "command": args.command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()},
        "seed": getattr(args, "seed", None),
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items()) if p is not None},
        "tool_version": __version__,
    }


def read_eeg(path, fmt: str = "auto", afe: Optional[AfeModel] = None) -> np.ndarray:
    """Samples in microvolts.

    ``raw``: header-less int16 little-endian ADC codes. ``csv``: one header
    line, microvolts in the first column.
    """
    path = Path(path)
    if fmt == "auto":
        fmt = "csv" if path.suffix.lower() == ".csv" else "raw"
    try:
        if fmt == "raw":
            blob = path.read_bytes()
            if len(blob) % 2:
                raise DataError(f"{path}: odd byte count for int16 samples")
            return (afe or AfeModel()).to_uv(np.frombuffer(blob, dtype="<i2"))
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise DataError(f"{path}: CSV needs a header and at least one sample")
        return np.array([float(r[0]) for r in rows[1:] if r], dtype=np.float64)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def encode_eeg(samples_uv, fmt: str, afe: Optional[AfeModel] = None) -> bytes:
    if fmt == "raw":
        codes, _ = (afe or AfeModel()).digitize(samples_uv)
        return codes.astype("<i2").tobytes()
    buf = io.StringIO()
    buf.write("uv\n")
    for v in np.asarray(samples_uv, dtype=np.float64).tolist():
        buf.write(f"{v!r}\n")
    return buf.getvalue().encode("utf-8")


def load_model_config(args) -> ModelConfig:
    path = getattr(args, "config", None)
    seg = getattr(args, "segment", None)
    try:
        cfg = load_config(path) if path else reference_config()
        cfg.validate()
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")
    except OSError as exc:
        raise UsageError(str(exc))
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")
    if seg is not None and seg != cfg.segment_s:
        cfg = cfg.with_segment(seg)
    return cfg


def load_weights(path) -> WeightBundle:
    if path is None:
        from .fixtures import load_fixture

        return load_fixture()
    try:
        return load_bundle(path)
    except OSError as exc:
        raise DataError(str(exc))


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(str(exc))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")


def engine_for(cfg: ModelConfig, bundle: WeightBundle, mode: str, calibration: Optional[str]):
    """Build an engine in ``mode``, quantizing in memory when a report is given."""
    if mode == "float":
        if bundle.quantized:
            raise UsageError("float mode needs float weights")
        return load_engine(cfg, bundle)
    if not bundle.quantized:
        if calibration is None:
            raise UsageError("quant mode with float weights needs --calibration")
        params = params_from_report(read_json(calibration))
        bundle = build_quantized_model(bundle, params, cfg)
    return load_engine(cfg, bundle)


def calibration_segments(args, cfg: ModelConfig) -> list:
    win = cfg.segment_samples
    if args.eeg:
        x = read_eeg(args.eeg, args.format)
    else:
        from .fixtures import synthetic_recording

        x = synthetic_recording(args.seed, args.windows, cfg.segment_s).samples
    n = len(x) // win
    if n < cfg.seq_len:
        raise DataError(f"calibration needs at least {cfg.seq_len} windows, got {n}")
    return [x[k * win:(k + 1) * win] for k in range(n)]


# --------------------------------------------------------------------- commands

def cmd_estimate(args) -> int:
    cfg = load_model_config(args)
    rep = resource_report(cfg, parallel_kernels=args.parallel_kernels, clock_hz=args.clock_mhz * 1e6)
    sys.stdout.write(rep.to_table())
    if args.json:
        sys.stdout.write(rep.to_json())
    if args.out:
        write_output(args.out, rep.to_json(), make_manifest(args, {"config": args.config}))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_model_config(args)
    bundle = load_weights(args.weights)
    if bundle.quantized:
        raise UsageError("calibration needs float weights")
    try:
        method = CalibMethod.parse(args.method, args.percentile)
    except ValueError as exc:
        raise UsageError(str(exc))
    engine = load_engine(cfg, bundle)
    hists = run_calibration_pass(engine, calibration_segments(args, cfg))
    report = calibration_report(calibrate_all(hists, method), method, hists)
    text = dump_report(report)
    if args.out:
        write_output(args.out, text, make_manifest(args, {"weights": args.weights, "eeg": args.eeg}))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = load_model_config(args)
    bundle = load_weights(args.weights)
    if bundle.quantized:
        raise UsageError("weights are already quantized")
    report = read_json(args.calibration)
    methods = {e.get("method") for e in report.values() if isinstance(e, dict)}
    method = CalibMethod.parse(methods.pop()) if len(methods) == 1 else None
    qb = build_quantized_model(bundle, params_from_report(report), cfg, method)
    write_output(args.out, to_bytes(qb),
                 make_manifest(args, {"weights": args.weights, "calibration": args.calibration}))
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = load_model_config(args)
    engine = engine_for(cfg, load_weights(args.weights), args.mode, args.calibration)
    x = read_eeg(args.eeg, args.format)
    fs = cfg.sample_rate
    win = cfg.segment_samples
    hop = win if args.hop is None else int(round(args.hop * fs))
    if not 0 < hop <= win:
        raise UsageError("hop must be positive and no longer than the window")
    if len(x) < win:
        raise DataError(f"recording shorter than one {cfg.segment_s}-s window")
    rows = []
    for k, (t, res) in enumerate(classify_stream(x, engine, win, hop)):
        row = {"window": k, "t_end": t, "warming_up": res.warming_up,
               "stage": None if res.warming_up else res.stage.name}
        for s in SleepStage:
            row[f"p_{s.name}"] = None if res.warming_up else float(res.probs[int(s)])
        rows.append(row)
    if args.output_format == "json":
        text = json.dumps(rows, indent=1) + "\n"
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v))
                        for k, v in r.items()})
        text = buf.getvalue()
    if args.out:
        write_output(args.out, text, make_manifest(args, {"weights": args.weights, "eeg": args.eeg}))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _loop_config(args) -> LoopConfig:
    if args.loop_config:
        try:
            return LoopConfig.from_dict(read_json(args.loop_config))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid loop config: {exc}")
    try:
        return LoopConfig(
            window_s=args.segment or 20,
            hop_s=args.hop,
            trigger=TriggerConfig(delay_samples=args.delay,
                                  gate_stages=frozenset(args.gate.split(",")),
                                  refractory_samples=args.refractory),
            mode=args.mode,
            forced_stage=args.forced_stage,
            settle_s=args.settle,
        )
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid loop settings: {exc}")


def cmd_simulate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = None
    if args.preset == "fig6":
        x, loop = fig6_demo(cycles=args.cycles, delay_samples=args.delay)
        engine = None
        sample_rate = 256
    else:
        loop = _loop_config(args)
        cfg = load_model_config(args)
        if cfg.segment_s != loop.window_s:
            cfg = cfg.with_segment(loop.window_s)
        sample_rate = cfg.sample_rate
        engine = None
        if loop.forced_stage is None:
            engine = engine_for(cfg, load_weights(args.weights), loop.mode, args.calibration)
        if args.eeg:
            x = read_eeg(args.eeg, args.format)
        else:
            from .fixtures import synthetic_recording

            rec = synthetic_recording(args.seed, args.windows, loop.window_s)
            x, stages = rec, rec.stages
    events = run_loop(x, engine, loop, sample_rate)
    summary = summarize(events, loop, stages, sample_rate)
    manifest = make_manifest(args, {"weights": args.weights, "calibration": args.calibration,
                                    "eeg": args.eeg, "loop_config": args.loop_config})
    write_output(out_dir / "events.ndjson", "".join(ev.to_json() + "\n" for ev in events), manifest)
    write_output(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", manifest)
    if args.trace_csv:
        write_output(out_dir / "trace.csv", _trace_csv(x, events, loop, sample_rate), manifest)
    c = summary["counts"]
    print(f"events: {sum(c.values())}  triggers: {c.get('trigger', 0)}  "
          f"classifications: {c.get('classification', 0)}")
    if "score" in summary:
        s = summary["score"]
        print(f"acc {s['acc']:.4f}  macro-F1 {s['macro_f1']:.4f}  kappa {s['kappa']:.4f}")
    return EXIT_OK


def _trace_csv(x, events, loop: LoopConfig, sample_rate: int) -> str:
    from .dsp import DiscreteBiquadCascade

    raw = getattr(x, "samples", x)
    filtered = DiscreteBiquadCascade(loop.components, sample_rate).process(raw)
    stage = np.full(len(raw), "", dtype=object)
    trig = np.zeros(len(raw), dtype=np.int64)
    cls = [(ev.t, ev.data["stage"]) for ev in events if ev.kind == "classification"]
    for (t0, s), (t1, _) in zip(cls, cls[1:] + [(len(raw), None)]):
        stage[t0:t1] = s
    if loop.forced_stage is not None:
        stage[:] = loop.forced_stage.name
    for ev in events:
        if ev.kind == "trigger" and ev.t < len(raw):
            trig[ev.t] = 1
    buf = io.StringIO()
    buf.write("time_s,raw,filtered,stage,trigger\n")
    for i, (r, f) in enumerate(zip(np.asarray(raw).tolist(), filtered.tolist())):
        buf.write(f"{i / sample_rate!r},{r!r},{f!r},{stage[i]},{trig[i]}\n")
    return buf.getvalue()


def cmd_filter_design(args) -> int:
    try:
        if args.preset == "equal":
            r = args.r if args.r is not None else 1.0 / (2 * math.pi * args.f0 * args.c)
            comps = equal_components(r, args.c)
        elif args.preset == "custom":
            vals = [args.R1, args.R2, args.R3, args.R4, args.C1, args.C2]
            if any(v is None for v in vals):
                raise UsageError("custom preset needs --R1 --R2 --R3 --R4 --C1 --C2")
            comps = BiquadComponents(*vals)
        else:
            comps = design_components(args.f0, args.q, args.c)
        if args.scale != 1.0:
            comps = comps.scaled(args.scale)
        report = discretize(comps, args.fs).report()
    except ValueError as exc:
        raise UsageError(str(exc))
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        write_output(args.out, text, make_manifest(args, {}))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_pinknoise(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    x = pink_noise(args.n, args.fs, args.seed, args.mode, args.cutoff)
    if args.report:
        lo, hi = (1.0, 100.0) if args.mode == "multi_pole" else (10 * args.fs / 1000, 100 * args.fs / 1000)
        slope = spectral_slope_db_per_decade(x, args.fs, lo, hi)
        print(json.dumps({"mode": args.mode, "band_hz": [lo, hi], "slope_db_per_decade": slope}))
    if args.out:
        fmt = "csv" if args.out.endswith(".csv") else "raw"
        # raw: int16 with unit RMS mapped to 4096 codes
        data = encode_eeg(x * 4096.0 * AfeModel().lsb_uv, fmt) if fmt == "raw" else encode_eeg(x, fmt)
        write_output(args.out, data, make_manifest(args, {}))
    return EXIT_OK


def cmd_lut_dump(args) -> int:
    sys.stdout.write(dump_table())
    return EXIT_OK


# ------------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sleepmod", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp, segment=True):
        sp.add_argument("--config", help="model config JSON (default: shipped reference)")
        if segment:
            sp.add_argument("--segment", type=int, choices=(20, 30), help="segment length in seconds")

    sp = sub.add_parser("estimate", help="parameter, MAC, memory and cycle report")
    model_args(sp)
    sp.add_argument("--parallel-kernels", type=int, default=4)
    sp.add_argument("--clock-mhz", type=float, default=20.0)
    sp.add_argument("--json", action="store_true", help="also print the JSON report")
    sp.add_argument("--out", help="write the JSON report here")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("calibrate", help="activation thresholds from a float model")
    model_args(sp)
    sp.add_argument("--weights", help="float SLPW file (default: shipped fixture)")
    sp.add_argument("--method", default="percentile", help="minmax | entropy | percentile[:p]")
    sp.add_argument("--percentile", type=float, default=None)
    sp.add_argument("--eeg", help="calibration recording (raw int16 or CSV)")
    sp.add_argument("--format", default="auto", choices=("auto", "raw", "csv"))
    sp.add_argument("--windows", type=int, default=512, help="synthetic windows when no --eeg")
    sp.add_argument("--seed", type=int, default=2)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("quantize", help="int8 weight file from float weights and a calibration report")
    model_args(sp)
    sp.add_argument("--weights")
    sp.add_argument("--calibration", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("infer", help="per-window stage predictions")
    model_args(sp)
    sp.add_argument("--weights")
    sp.add_argument("--calibration", help="report for in-memory quantization")
    sp.add_argument("--mode", choices=("float", "quant"), default="quant")
    sp.add_argument("--eeg", required=True)
    sp.add_argument("--format", default="auto", choices=("auto", "raw", "csv"))
    sp.add_argument("--hop", type=float, help="hop in seconds (default: one window)")
    sp.add_argument("--output-format", choices=("csv", "json"), default="csv")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("simulate", help="closed-loop simulation")
    model_args(sp)
    sp.add_argument("--preset", choices=("none", "fig6"), default="none",
                    help="fig6: 1 Hz sinusoid, stage pinned to N3")
    sp.add_argument("--cycles", type=int, default=110)
    sp.add_argument("--loop-config", help="LoopConfig JSON; overrides the loop flags")
    sp.add_argument("--weights")
    sp.add_argument("--calibration")
    sp.add_argument("--mode", choices=("float", "quant"), default="quant")
    sp.add_argument("--eeg")
    sp.add_argument("--format", default="auto", choices=("auto", "raw", "csv"))
    sp.add_argument("--windows", type=int, default=30, help="synthetic windows when no --eeg")
    sp.add_argument("--hop", type=float, default=1.0)
    sp.add_argument("--delay", type=int, default=0, help="trigger delay in samples")
    sp.add_argument("--gate", default="N2,N3")
    sp.add_argument("--refractory", type=int, default=0)
    sp.add_argument("--forced-stage")
    sp.add_argument("--settle", type=float, default=5.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trace-csv", action="store_true")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("filter-design", help="biquad component and coefficient report")
    sp.add_argument("--preset", choices=("reference", "equal", "custom"), default="reference")
    sp.add_argument("--f0", type=float, default=1.0)
    sp.add_argument("--q", type=float, default=2.0)
    sp.add_argument("--r", type=float, help="equal preset resistor (default: 1/(2 pi f0 C))")
    sp.add_argument("--c", type=float, default=100e-9)
    for name in ("R1", "R2", "R3", "R4", "C1", "C2"):
        sp.add_argument(f"--{name}", type=float)
    sp.add_argument("--scale", type=float, default=1.0, help="impedance scaling factor")
    sp.add_argument("--fs", type=float, default=256.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_filter_design)

    sp = sub.add_parser("pinknoise", help="seeded pink-noise stimulus")
    sp.add_argument("--n", type=int, default=1 << 16)
    sp.add_argument("--fs", type=float, default=1000.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mode", choices=("multi_pole", "single_pole"), default="multi_pole")
    sp.add_argument("--cutoff", type=float)
    sp.add_argument("--report", action="store_true", help="print the fitted spectral slope")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_pinknoise)

    sp = sub.add_parser("lut-dump", help="print the tanh lookup table")
    sp.set_defaults(func=cmd_lut_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, WeightFormatError, CalibrationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
