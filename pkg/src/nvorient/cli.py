"""``nvorient`` command-line entry point.

Exit codes: 0 ok, 2 bad input (parse error, invalid config, malformed
file), 3 bench command error, 4 replay divergence, 5 ``--strict`` site
failure, 6 warning (unreliable classification, doubtful g2 fit).
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import functools
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, apply, parse_kv, parse_overrides
from .controller import ControllerConfig, FabricationPlan, run_campaign
from .emission import (
    EmissionConfig,
    EmissionModel,
    PolarizationPattern,
    classify,
    fit_pattern,
    pattern,
    uniform_angles,
)
from .geometry import NvAxis, SurfaceCut, axis_in_lab
from .hal.bench import MockBench, ScannerModel, StageModel
from .hal.eventlog import LogSchemaError, bench_log, dumps, loads, replay, write_atomic
from .hal.interfaces import BenchError
from .hal.protocol import ScriptError
from .hal.script import CommandError, execute_script
from .kinetics import KineticsConfig
from .photonics import G2Experiment, HbtHistogram, fit_g2, run_g2_trial, synthesize_confocal_image

EXIT_OK, EXIT_INPUT, EXIT_COMMAND, EXIT_DIVERGED, EXIT_STRICT, EXIT_WARN = 0, 2, 3, 4, 5, 6


class UsageError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


@dataclass(frozen=True)
class BenchSetup:
    surface: SurfaceCut = SurfaceCut.CUT111
    kinetics: KineticsConfig = field(default_factory=KineticsConfig)
    emission: EmissionConfig = field(default_factory=EmissionConfig)
    stage: StageModel = field(default_factory=StageModel)
    scanner: ScannerModel = field(default_factory=ScannerModel)


@dataclass(frozen=True)
class CampaignSetup:
    plan: FabricationPlan = field(default_factory=FabricationPlan)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    kinetics: KineticsConfig = field(default_factory=KineticsConfig)
    emission: EmissionConfig = field(default_factory=EmissionConfig)
    stage: StageModel = field(default_factory=StageModel)
    scanner: ScannerModel = field(default_factory=ScannerModel)


@dataclass(frozen=True)
class G2Setup:
    g2: G2Experiment = field(default_factory=G2Experiment)


def load_setup(default, path: Optional[str], overrides) -> object:
    """Config file first, then ``--set`` overrides on top."""
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values = parse_kv(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        values.update(parse_overrides(overrides))
        return apply(default, values)
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _require_seed(seed: Optional[int]) -> int:
    if seed is None:
        raise UsageError("a --seed is required for stochastic commands")
    return seed


# ------------------------------------------------------------ subcommands


def cmd_campaign(args) -> int:
    setup = load_setup(CampaignSetup(), args.config, args.set)
    seed = args.seed if args.seed is not None else setup.plan.seed
    seed = _require_seed(seed)
    bench = MockBench(
        kinetics=setup.kinetics,
        emission=setup.emission,
        seed=seed,
        surface=setup.plan.surface,
        stage=setup.stage,
        scanner=setup.scanner,
    )
    report = run_campaign(setup.plan, bench, setup.controller, setup.emission, args.image_pitch)
    os.makedirs(args.out_dir, exist_ok=True)
    base = os.path.join(args.out_dir, args.prefix)
    write_atomic(base + ".jsonl", dumps(bench_log(bench)))
    write_atomic(base + "_summary.csv", report.summary_csv())
    if report.image is not None:
        write_atomic(base + "_image.csv", report.image.to_csv())
        write_atomic(base + "_image.pgm", report.image.to_pgm(), binary=True)
    n = len(report.logs)
    print(f"sites: {n}  success: {report.successes}  failure: {n - report.successes}")
    print("cycles: " + " ".join(f"{k}:{v}" for k, v in report.cycle_histogram().items()))
    print("initial classes: " + " ".join(f"{k}:{v}" for k, v in report.initial_tally().items()))
    if args.strict and report.successes < n:
        return EXIT_STRICT
    return EXIT_OK


def _parse_axis(text: str, surface: SurfaceCut) -> np.ndarray:
    if "," in text:
        try:
            v = np.array([float(p) for p in text.split(",")])
        except ValueError:
            raise UsageError(f"bad axis vector {text!r}") from None
        if v.size != 3:
            raise UsageError("axis vector needs three components")
        return v
    try:
        return axis_in_lab(NvAxis.parse(text), surface)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_pattern(args) -> int:
    emission = load_setup(BenchSetup(), None, args.set).emission
    if args.model:
        emission = dataclasses.replace(emission, model=EmissionModel(args.model))
    surface = SurfaceCut.parse(args.surface)
    axis = _parse_axis(args.axis, surface)
    try:
        p = pattern(axis, uniform_angles(args.angles), emission)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.normalize:
        p = p.normalized()
    _emit(p.to_csv(), args.out)
    return EXIT_OK


def cmd_classify(args) -> int:
    emission = load_setup(BenchSetup(), None, args.set).emission
    try:
        p = PolarizationPattern.from_csv(_read(args.input))
        fit = fit_pattern(p)
        result = classify(
            fit,
            SurfaceCut.parse(args.surface),
            azimuth_offset=args.azimuth_offset,
            background=args.background,
            config=emission,
        )
    except ValueError as exc:
        raise UsageError(f"{args.input}: {exc}") from None
    margin = "inf" if math.isinf(result.margin) else f"{result.margin:.6g}"
    print(
        f"visibility={result.visibility:.6f} azimuth={fit.azimuth:.6f} "
        f"class={result.class_id} members={result.orientation.label} margin={margin} "
        f"reliable={'yes' if result.reliable else 'no'}"
    )
    if not result.reliable:
        print(f"warning: {result.reason}", file=sys.stderr)
        return EXIT_WARN
    return EXIT_OK


def _fit_line(prefix: str, fit) -> str:
    return (
        f"{prefix}g2_zero_raw={fit.g2_zero_raw:.6f} g2_zero_corrected={fit.g2_zero_corrected:.6f} "
        f"rho={fit.rho:.6f} a={fit.params.a:.6f} tau1_ns={fit.params.tau1:.6f} "
        f"tau2_ns={fit.params.tau2:.6f} chi2_red={fit.chi2_red:.6f}"
    )


def _doubtful(fit) -> bool:
    return not fit.converged or bool(fit.message.startswith(("no significant", "delay span")))


def cmd_g2(args) -> int:
    if args.input:
        try:
            hist = HbtHistogram.from_csv(_read(args.input))
            fit = fit_g2(hist, rho=args.rho)
        except ValueError as exc:
            raise UsageError(f"{args.input}: {exc}") from None
        print(_fit_line("", fit))
        if _doubtful(fit):
            print(f"warning: {fit.message}", file=sys.stderr)
            return EXIT_WARN
        return EXIT_OK

    exp = load_setup(G2Setup(), args.config, args.set).g2
    if args.rho is not None:
        exp = dataclasses.replace(exp, rho=args.rho)
    seed = _require_seed(args.seed)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    rows = ["trial,g2_zero_raw,g2_zero_corrected,chi2_red,converged"]
    status = EXIT_OK
    corrected = []
    # every trial owns its RNG streams, so results do not depend on --jobs
    run = functools.partial(run_g2_trial, exp, seed)
    if args.jobs > 1 and args.trials > 1:
        pool = concurrent.futures.ProcessPoolExecutor(max_workers=min(args.jobs, args.trials))
        results = pool.map(run, range(args.trials))
    else:
        pool, results = None, map(run, range(args.trials))
    for trial, (hist, fit) in enumerate(results):
        if trial == 0 and args.hist_out:
            write_atomic(args.hist_out, hist.to_csv())
        corrected.append(fit.g2_zero_corrected)
        rows.append(f"{trial},{fit.g2_zero_raw!r},{fit.g2_zero_corrected!r},{fit.chi2_red!r},{int(fit.converged)}")
        print(_fit_line(f"trial={trial} ", fit))
        if _doubtful(fit):
            print(f"warning: trial {trial}: {fit.message}", file=sys.stderr)
            status = EXIT_WARN
    if pool is not None:
        pool.shutdown()
    vals = np.asarray(corrected)
    print(
        f"truth={exp.truth:.6f} mean_corrected={vals.mean():.6f} "
        f"sd_corrected={vals.std(ddof=1) if vals.size > 1 else 0.0:.6f} "
        f"max_abs_error={np.abs(vals - exp.truth).max():.6f}"
    )
    if args.out:
        write_atomic(args.out, "\n".join(rows) + "\n")
    return status


def _read_emitters(path: str) -> list[tuple[float, float, float]]:
    out = []
    for lineno, line in enumerate(_read(path).splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("x"):
            continue
        parts = line.split(",")
        try:
            x, y, b = (float(p) for p in parts)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: expected x,y,brightness") from None
        out.append((x, y, b))
    return out


def cmd_image(args) -> int:
    if args.emitters:
        emitters = _read_emitters(args.emitters)
    else:
        try:
            rows, cols = (int(v) for v in args.grid.lower().split("x"))
        except ValueError:
            raise UsageError("--grid must look like 3x3") from None
        emitters = [(i * args.pitch, j * args.pitch, args.brightness) for i in range(rows) for j in range(cols)]
    if args.region:
        region = tuple(float(v) for v in args.region.split(","))
        if len(region) != 4:
            raise UsageError("--region needs x0,y0,x1,y1")
    else:
        xs = [e[0] for e in emitters] or [0.0]
        ys = [e[1] for e in emitters] or [0.0]
        m = 5 * args.psf_sigma + 1.0
        region = (min(xs) - m, min(ys) - m, max(xs) + m, max(ys) + m)
    try:
        img = synthesize_confocal_image(emitters, args.psf_sigma, region, args.pixel, args.background)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.out_pgm:
        write_atomic(args.out_pgm, img.to_pgm(), binary=True)
    _emit(img.to_csv(), args.out_csv)
    return EXIT_OK


def cmd_run(args) -> int:
    setup = load_setup(BenchSetup(), args.config, args.set)
    if args.surface:
        setup = dataclasses.replace(setup, surface=SurfaceCut.parse(args.surface))
    bench = MockBench(
        kinetics=setup.kinetics,
        emission=setup.emission,
        seed=_require_seed(args.seed),
        surface=setup.surface,
        stage=setup.stage,
        scanner=setup.scanner,
    )
    try:
        records = execute_script(bench, _read(args.script))
    except ScriptError as exc:
        print(f"parse error: {args.script}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CommandError as exc:
        print(f"command error: {args.script}: {exc}", file=sys.stderr)
        if args.log:
            write_atomic(args.log, dumps(bench_log(bench)))
        return EXIT_COMMAND
    _emit(dumps(records), args.log)
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        records = loads(_read(args.log))
        report = replay(records)
    except LogSchemaError as exc:
        raise UsageError(f"{args.log}: {exc}") from None
    if report.divergence is not None:
        print(f"divergence: {report.divergence}")
        return EXIT_DIVERGED
    if report.error:
        print(f"divergence: {report.error}")
        return EXIT_DIVERGED
    print(f"ok: {report.checked} commands reproduced")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def _add_config(p, with_file: bool = True) -> None:
    if with_file:
        p.add_argument("--config", metavar="PATH", help="key = value configuration file")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one configuration key, e.g. kinetics.p_form=1e-5 (repeatable; wins over --config)",
    )


def _add_seed(p) -> None:
    p.add_argument("--seed", type=int, help="root RNG seed (required; no wall-clock default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvorient", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}", help="print the version and exit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("campaign", help="fabricate an array on the mock bench", description="Run a closed-loop array campaign.")
    _add_config(p)
    _add_seed(p)
    p.add_argument("--out-dir", default=".", help="directory for the log, summary and image files")
    p.add_argument("--prefix", default="campaign", help="file name prefix for the outputs")
    p.add_argument("--image-pitch", type=float, default=0.1, help="confocal image pixel pitch in um (0 skips the image)")
    p.add_argument("--strict", action="store_true", help="exit with code 5 if any site fails")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("pattern", help="model polarization pattern as CSV", description="Print a model polarization pattern.")
    p.add_argument("--surface", default="111", choices=[s.value for s in SurfaceCut], help="surface cut")
    p.add_argument("--axis", required=True, help="axis name or label (A111, [1-1-1]) or lab-frame unit vector x,y,z")
    p.add_argument("--angles", type=int, default=19, help="number of analyzer angles over [0, pi)")
    p.add_argument("--model", choices=[m.value for m in EmissionModel], help="emission model (default projection)")
    p.add_argument("--normalize", action="store_true", help="scale intensities to unit mean")
    p.add_argument("--out", help="output CSV path (default stdout)")
    _add_config(p, with_file=False)
    p.set_defaults(func=cmd_pattern)

    p = sub.add_parser("classify", help="fit and classify a pattern CSV", description="Fit a measured pattern and assign its orientation class.")
    p.add_argument("--surface", default="111", choices=[s.value for s in SurfaceCut], help="surface cut")
    p.add_argument("--input", required=True, help="pattern CSV with header theta_rad,intensity[,error]")
    p.add_argument("--background", type=float, default=0.0, help="background level per point, same units as the intensities")
    p.add_argument("--azimuth-offset", type=float, default=0.0, help="lab azimuth calibration offset in rad")
    _add_config(p, with_file=False)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("g2", help="synthesize and fit HBT histograms", description="Simulate HBT runs and fit g2, or fit a histogram CSV.")
    _add_config(p)
    _add_seed(p)
    p.add_argument("--trials", type=int, default=1, help="number of independent simulated runs")
    p.add_argument("--rho", type=float, help="signal fraction for background correction (default: from the rates)")
    p.add_argument("--input", help="fit this histogram CSV (tau_ns,coincidences,g2_norm) instead of simulating")
    p.add_argument("--hist-out", help="write the first trial's histogram CSV here")
    p.add_argument("--out", help="write per-trial results CSV here")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent trials (output does not depend on it)")
    p.set_defaults(func=cmd_g2)

    p = sub.add_parser("image", help="synthesize a confocal image", description="Render Gaussian emitter spots to CSV and PGM.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--grid", default="3x3", help="emitter grid ROWSxCOLS at --pitch spacing")
    src.add_argument("--emitters", help="CSV of x,y,brightness emitters instead of a grid")
    p.add_argument("--pitch", type=float, default=10.0, help="grid pitch in um")
    p.add_argument("--brightness", type=float, default=5e4, help="peak brightness of grid emitters")
    p.add_argument("--psf-sigma", type=float, default=0.25, help="Gaussian PSF sigma in um")
    p.add_argument("--pixel", type=float, default=0.1, help="pixel pitch in um")
    p.add_argument("--region", help="x0,y0,x1,y1 in um (default: emitters plus a margin)")
    p.add_argument("--background", type=float, default=0.0, help="uniform background level")
    p.add_argument("--out-csv", help="image CSV path (default stdout)")
    p.add_argument("--out-pgm", help="16-bit PGM path")
    p.set_defaults(func=cmd_image)

    p = sub.add_parser("run", help="execute a bench command script", description="Run a command script on a fresh mock bench.")
    p.add_argument("script", help="script file, one command per line")
    _add_config(p)
    _add_seed(p)
    p.add_argument("--surface", choices=[s.value for s in SurfaceCut], help="surface cut (overrides the config)")
    p.add_argument("--log", help="JSONL event log path (default stdout)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="verify a JSONL log by re-execution", description="Replay a log on a fresh bench and compare observables.")
    p.add_argument("log", help="JSONL event log")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BenchError as exc:
        print(f"command error: {exc}", file=sys.stderr)
        return EXIT_COMMAND


if __name__ == "__main__":
    sys.exit(main())
