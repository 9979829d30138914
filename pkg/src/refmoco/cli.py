"""Command-line interface: ``phantom``, ``simulate``, ``correct``, ``metrics``, ``bench``.

Exit codes: 0 success, 2 usage or input error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .forward import zero_filled_reconstruction
from .geometry import InvalidParameterError, MotionTrace
from .io import (
    FormatError,
    read_json,
    read_kspace,
    read_pattern,
    read_trace_csv,
    read_volume,
    write_json,
    write_kspace,
    write_manifest,
    write_pattern,
    write_slice_png,
    write_trace_csv,
    write_volume,
)
from .metrics import QualityReport, quality_report
from .nufft import ComplexVolume3D, InvalidInputError
from .optimizer import DivergenceError, SolverConfig, run_correction
from .regularization import ConvergenceError
from .simulation import (
    PRESETS,
    InvalidSpecError,
    PhantomSpec,
    head_phantom_spec,
    make_motion_script,
    make_phantom,
    make_sampling_pattern,
    simulate_acquisition,
)

EXIT_OK, EXIT_USAGE, EXIT_SOLVER = 0, 2, 3

log = logging.getLogger("refmoco")


class UsageError(Exception):
    pass


def _load_spec(args) -> PhantomSpec:
    if args.spec:
        try:
            d = read_json(args.spec)
            spec = PhantomSpec(**d)
        except (TypeError, KeyError) as exc:
            raise UsageError(f"bad phantom spec: {exc}") from exc
    else:
        if args.dims:
            spec = head_phantom_spec(tuple(args.dims), lesion=args.lesion)
        else:
            spec = PRESETS[args.preset]()
            if args.lesion:
                spec = head_phantom_spec(spec.dims, lesion=True)
    if args.voxel:
        spec = PhantomSpec(spec.dims, spec.ellipsoids, spec.n_contrasts, tuple(args.voxel), spec.lesion)
    return spec


def cmd_phantom(args) -> int:
    spec = _load_spec(args)
    out = Path(args.out)
    vols = make_phantom(spec)
    outputs = {}
    for i, v in enumerate(vols):
        outputs[f"contrast{i}"] = write_volume(out / f"contrast{i}.json", v, spec.voxel_size)
        outputs[f"contrast{i}_payload"] = out / f"contrast{i}.raw"
    spec_path = out / "phantom_spec.json"
    write_json(spec_path, spec.to_dict())
    outputs["spec"] = spec_path
    write_manifest(out, "phantom", {"preset": None if args.spec else args.preset, "spec": spec.to_dict()},
                   {"spec_file": args.spec} if args.spec else {}, outputs)
    print(json.dumps({"dims": list(spec.dims), "contrasts": len(vols), "out": str(out)}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    truth, meta = read_volume(args.truth)
    if truth.ndim != 3:
        raise UsageError("truth must be a 3D image volume")
    out = Path(args.out)
    voxel = meta.voxel_size_mm
    pattern = make_sampling_pattern(truth.shape, args.pattern, args.accel if args.pattern != "linear" else
                                    tuple(args.accel_pe or (int(args.accel), int(args.accel))),
                                    seed=args.seed, readout_axis=args.readout_axis, voxel_size=voxel)
    seeds = {"pattern": args.seed, "motion": args.seed + 1, "noise": args.seed + 2}
    transitions = []
    if args.trace == "identity":
        trace = MotionTrace.identity(pattern.n_t)
    elif args.trace == "script":
        script = make_motion_script(pattern.n_t, args.poses, args.max_tau, args.max_phi, seeds["motion"])
        trace, transitions = script.trace, script.transitions
    else:
        trace = read_trace_csv(args.trace)
        if len(trace) != pattern.n_t:
            raise UsageError(f"trace has {len(trace)} lines, pattern has {pattern.n_t}")
    data = simulate_acquisition(truth, trace, pattern, args.noise, seeds["noise"])
    outputs = {
        "kspace": write_kspace(out / "kspace.json", data),
        "kspace_payload": out / "kspace.raw",
        "pattern": write_pattern(out / "pattern.json", pattern),
        "trace": write_trace_csv(out / "trace.csv", trace),
        "zero_filled": write_volume(out / "zero_filled.json", zero_filled_reconstruction(data), voxel),
        "zero_filled_payload": out / "zero_filled.raw",
    }
    config = {
        "pattern": args.pattern, "accel": args.accel, "readout_axis": args.readout_axis,
        "trace": args.trace, "poses": args.poses, "max_tau_mm": args.max_tau, "max_phi_deg": args.max_phi,
        "noise_sigma": args.noise, "transitions": transitions,
    }
    write_manifest(out, "simulate", config, {"truth": Path(args.truth).with_suffix(".json")}, outputs, seeds)
    print(json.dumps({"lines": pattern.n_t, "transitions": transitions, "out": str(out)}))
    return EXIT_OK


def _solver_config(args) -> SolverConfig:
    d = read_json(args.config) if args.config else {}
    if args.mode:
        d["mode"] = args.mode
    if args.iters:
        d["iters_per_stage"] = args.iters
    try:
        return SolverConfig.from_dict(d)
    except (TypeError, InvalidParameterError) as exc:
        raise UsageError(f"bad solver config: {exc}") from exc


def cmd_correct(args) -> int:
    cfg = _solver_config(args)
    if cfg.mode == "guided" and not args.reference:
        raise UsageError("guided mode needs --reference")
    run = Path(args.run)
    pattern = read_pattern(run / "pattern.json")
    data = read_kspace(run / "kspace.json", pattern)
    reference = None
    inputs = {"kspace": run / "kspace.json", "pattern": run / "pattern.json"}
    if cfg.mode == "guided":
        ref, ref_meta = read_volume(args.reference)
        reference = ComplexVolume3D(ref, ref_meta.voxel_size_mm)
        inputs["reference"] = Path(args.reference).with_suffix(".json")
    out = Path(args.out or run / "corrected")
    try:
        vol, trace, report = run_correction(data, pattern, reference, cfg)
    except DivergenceError as exc:
        outputs = {}
        if exc.state is not None:
            outputs["last_good_volume"] = write_volume(out / "last_good.json", exc.state.u)
        write_json(out / "failure.json", {"error": str(exc), "last_good": bool(outputs)})
        outputs["failure"] = out / "failure.json"
        write_manifest(out, "correct", cfg.to_dict(), inputs, outputs)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    timings = report.pop("timings")
    outputs = {
        "volume": write_volume(out / "corrected.json", vol.data, pattern.voxel_size),
        "volume_payload": out / "corrected.raw",
        "trace": write_trace_csv(out / "trace_estimated.csv", trace),
    }
    window = write_slice_png(out / "slices.png", vol.data)
    outputs["png"] = out / "slices.png"
    report["png_window"] = window
    write_json(out / "report.json", report)
    outputs["report"] = out / "report.json"
    write_manifest(out, "correct", cfg.to_dict(), inputs, outputs, {"solver": cfg.seed}, timings,
                   {"png_window": window})
    print(json.dumps({"final_misfit": report["final_misfit"], "out": str(out)}))
    return EXIT_OK


def cmd_metrics(args) -> int:
    x, _ = read_volume(args.volume)
    ref, _ = read_volume(args.reference)
    if x.shape != ref.shape:
        raise UsageError(f"shape mismatch {x.shape} vs {ref.shape}")
    rep = quality_report(x, ref)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    if args.csv:
        path = Path(args.csv)
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if not path.exists() or path.stat().st_size == 0:
            writer.writerow(QualityReport.csv_header())
        writer.writerow(rep.csv_row(args.label or Path(args.volume).stem))
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench

    out = Path(args.out)
    cfg = _solver_config(args) if (args.config or args.iters) else None
    report, timings = run_bench(args.size, args.seed, cfg, cases=args.cases)
    write_json(out / "report.json", report)
    write_json(out / "timings.json", timings)
    write_manifest(out, "bench", {"size": args.size, "cases": args.cases,
                                  "solver": report["solver"]}, {}, {"report": out / "report.json",
                                                                    "timings": out / "timings.json"},
                   {"seed": args.seed})
    failed = [c for c, r in report["cases"].items() if not r["passed"]]
    print(json.dumps({"cases": len(report["cases"]), "failed": failed}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refmoco", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="write multi-contrast phantom volumes")
    src = ph.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=sorted(PRESETS), default="two-contrast-64")
    src.add_argument("--spec", help="phantom spec JSON")
    ph.add_argument("--dims", type=int, nargs=3, help="grid size for the preset geometry")
    ph.add_argument("--voxel", type=float, nargs=3, help="voxel size in mm")
    ph.add_argument("--lesion", action="store_true", help="add a lesion to the target contrast")
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=cmd_phantom)

    si = sub.add_parser("simulate", help="simulate motion-corrupted k-space")
    si.add_argument("--truth", required=True, help="ground-truth volume sidecar")
    si.add_argument("--out", required=True)
    si.add_argument("--pattern", choices=("full", "linear", "randomized"), default="randomized")
    si.add_argument("--accel", type=float, default=2.0)
    si.add_argument("--accel-pe", type=int, nargs=2, help="per-axis strides for the linear pattern")
    si.add_argument("--readout-axis", type=int, default=0, choices=(0, 1, 2))
    si.add_argument("--trace", default="script", help="'script', 'identity' or a trace CSV")
    si.add_argument("--poses", type=int, default=1, help="number of position changes")
    si.add_argument("--max-tau", type=float, default=5.0, help="translation bound (mm)")
    si.add_argument("--max-phi", type=float, default=5.0, help="rotation bound (degrees)")
    si.add_argument("--noise", type=float, default=0.0)
    si.add_argument("--seed", type=int, default=0)
    si.set_defaults(func=cmd_simulate)

    co = sub.add_parser("correct", help="estimate motion and reconstruct")
    co.add_argument("--run", required=True, help="directory written by 'simulate'")
    co.add_argument("--reference", help="reference contrast volume sidecar")
    co.add_argument("--config", help="solver config JSON")
    co.add_argument("--mode", choices=("guided", "plain-tv"))
    co.add_argument("--iters", type=int, help="iterations per stage")
    co.add_argument("--out")
    co.set_defaults(func=cmd_correct)

    me = sub.add_parser("metrics", help="PSNR/SSIM between two volumes")
    me.add_argument("volume")
    me.add_argument("reference")
    me.add_argument("--csv", help="append a row to this CSV file")
    me.add_argument("--label")
    me.set_defaults(func=cmd_metrics)

    be = sub.add_parser("bench", help="run the benchmark matrix")
    be.add_argument("--out", required=True)
    be.add_argument("--size", type=int, default=64)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--cases", nargs="*", help="subset of cases (default: all)")
    be.add_argument("--config", help="solver config JSON")
    be.add_argument("--mode", choices=("guided", "plain-tv"), help=argparse.SUPPRESS)
    be.add_argument("--iters", type=int, help="iterations per stage")
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, InvalidInputError, InvalidParameterError, InvalidSpecError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, ConvergenceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
