#!/usr/bin/env python3
"""
photonstat command-line front end

Pipeline: simulate -> digitize -> herald -> stats -> report. Every command
writes a JSON run manifest (`<output>.manifest.json`) listing input digests
and the files it produced.

Exit codes: 0 success, 2 argument error, 3 data/format error,
4 calibration/statistics error.
"""

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from . import FORMAT_VERSION, __version__
from .config import config, ensure_valid_config
from .errors import ArgumentError, CalibrationError, DataError, PhotonstatError, TraceFormatError
from .events import (
    DEFAULT_THRESHOLD_HIGH,
    DEFAULT_THRESHOLD_LOW,
    digitize,
    read_events_file,
    read_trace,
    write_events_file,
    write_trace_file,
)
from .models import DigitizeMode, EventSeries, QReport, RunManifest, SimConfig, SourceKind, TraceFormat, WindowMode
from .sim import RNG_ALGORITHM, load_sim_config, render_trace, saturation_warnings, simulate_iteration
from .stats import (
    DEFAULT_TARGET_MEAN,
    DEFAULT_WINDOW_SLOTS,
    analyze_iterations,
    herald,
    histogram_csv,
    histogram_svg,
    qreport_text,
    read_qreport,
    window_slots_for,
    write_qreport,
)
from .utils import PathLike, file_digest, format_display, format_error, format_float, log_file_io, resolve_threads

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ARGUMENT = 2
EXIT_DATA = 3
EXIT_STATISTICS = 4


# ============================================================================
# MANIFESTS
# ============================================================================

def _manifest_path(output: PathLike) -> Path:
    return Path(f"{output}.manifest.json")


def write_manifest(
    output: PathLike,
    command_line: Sequence[str],
    inputs: Sequence[PathLike],
    outputs: Sequence[PathLike],
    started: float,
    sim_config: Optional[SimConfig] = None,
    warnings: Optional[List[str]] = None,
) -> RunManifest:
    manifest = RunManifest(
        command_line=list(command_line),
        format_version=FORMAT_VERSION,
        tool_version=__version__,
        inputs={str(p): file_digest(p) for p in inputs},
        sim_config=sim_config.model_dump(mode="json") if sim_config else None,
        outputs=[str(p) for p in outputs],
        wall_clock_s=time.perf_counter() - started,
        rng_algorithm=RNG_ALGORITHM if sim_config else None,
        warnings=warnings or [],
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    path = _manifest_path(output)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    log_file_io("Wrote manifest", path)
    return manifest


def verify_manifest(path: PathLike) -> List[str]:
    """Recompute input digests; returns one message per mismatch or missing file."""
    manifest = RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
    problems: List[str] = []
    for name, digest in manifest.inputs.items():
        if not Path(name).exists():
            problems.append(f"{name}: missing")
        elif file_digest(name) != digest:
            problems.append(f"{name}: digest changed")
    for name in manifest.outputs:
        if not Path(name).exists():
            problems.append(f"{name}: output missing")
    return problems


def _prepare(prefix: PathLike) -> None:
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)


def _resolve_window(window_slots: int, window_s: Optional[float], resolution: float) -> int:
    return window_slots if window_s is None else window_slots_for(window_s, resolution)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_simulate(
    config_path: PathLike,
    out_prefix: PathLike,
    iterations: int = 1,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    emit_trace: bool = False,
    command_line: Sequence[str] = (),
) -> RunManifest:
    """Write `<prefix>.iterNN[.signal|.idler].ev` per iteration (plus optional RAWF32 traces)."""
    started = time.perf_counter()
    if iterations < 1:
        raise ArgumentError(f"iterations must be >= 1, got {iterations}")
    cfg = load_sim_config(config_path)
    if seed is not None:
        cfg = SimConfig(**{**cfg.model_dump(), "rng_seed": seed})
    warnings = saturation_warnings(cfg)
    _prepare(out_prefix)

    logger.info(f"Simulating {iterations} x {cfg.kind.value} ({cfg.slot_count} slots each)")
    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        runs = list(pool.map(lambda i: simulate_iteration(cfg, i, threads=1), range(iterations)))

    outputs: List[Path] = []
    for i, arms in enumerate(runs):
        for arm, series in arms.items():
            stem = f"{out_prefix}.iter{i:02d}" + (f".{arm}" if arm else "")
            outputs.append(write_events_file(series, f"{stem}.ev"))
            if emit_trace:
                trace = render_trace(series, cfg, channel_label=arm or "signal")
                outputs.append(write_trace_file(trace, f"{stem}.trace.f32", TraceFormat.RAWF32))
    return write_manifest(out_prefix, command_line, [config_path], outputs, started, cfg, warnings)


def cmd_digitize(
    trace_path: PathLike,
    out_path: PathLike,
    threshold_high: float = DEFAULT_THRESHOLD_HIGH,
    threshold_low: float = DEFAULT_THRESHOLD_LOW,
    mode: str = DigitizeMode.HYSTERESIS.value,
    trace_format: Optional[str] = None,
    threads: Optional[int] = None,
    command_line: Sequence[str] = (),
) -> EventSeries:
    started = time.perf_counter()
    trace = read_trace(trace_path, trace_format)
    series = digitize(trace, threshold_high, threshold_low, mode=mode, threads=threads)
    _prepare(out_path)
    write_events_file(series, out_path)
    write_manifest(out_path, command_line, [trace_path], [out_path], started)
    return series


def cmd_herald(
    signal_path: PathLike,
    idler_path: PathLike,
    out_path: PathLike,
    window_slots: int = DEFAULT_WINDOW_SLOTS,
    window_mode: str = WindowMode.SYMMETRIC.value,
    window_s: Optional[float] = None,
    command_line: Sequence[str] = (),
) -> EventSeries:
    started = time.perf_counter()
    signal, idler = read_events_file(signal_path), read_events_file(idler_path)
    window = _resolve_window(window_slots, window_s, signal.resolution)
    series = herald(signal, idler, window, window_mode)
    _prepare(out_path)
    write_events_file(series, out_path)
    write_manifest(out_path, command_line, [signal_path, idler_path], [out_path], started)
    return series


def cmd_stats(
    event_paths: Sequence[PathLike],
    out_prefix: PathLike,
    herald_paths: Optional[Sequence[PathLike]] = None,
    window_slots: int = DEFAULT_WINDOW_SLOTS,
    window_mode: str = WindowMode.SYMMETRIC.value,
    target_mean: float = DEFAULT_TARGET_MEAN,
    bin_width: Optional[int] = None,
    output_format: str = "csv",
    threads: Optional[int] = None,
    label: str = "",
    window_s: Optional[float] = None,
    command_line: Sequence[str] = (),
) -> QReport:
    """Histogram CSV (and SVG) per iteration plus one aggregated Q report."""
    started = time.perf_counter()
    if not event_paths:
        raise ArgumentError("at least one event file is required")
    series = [read_events_file(p) for p in event_paths]
    inputs: List[PathLike] = list(event_paths)
    if herald_paths:
        if len(herald_paths) != len(event_paths):
            raise ArgumentError(f"{len(event_paths)} signal files but {len(herald_paths)} idler files")
        idlers = [read_events_file(p) for p in herald_paths]
        window = _resolve_window(window_slots, window_s, series[0].resolution)
        series = [herald(s, i, window, window_mode) for s, i in zip(series, idlers)]
        inputs += list(herald_paths)

    report = analyze_iterations(
        series,
        target_mean=target_mean,
        bin_width=bin_width,
        threads=threads,
        label=label,
        sources=[str(p) for p in event_paths],
    )

    _prepare(out_prefix)
    outputs: List[Path] = []
    for result in report.iterations:
        stem = f"{out_prefix}.iter{result.index:02d}.hist"
        csv_path = Path(f"{stem}.csv")
        csv_path.write_text(histogram_csv(result), encoding="utf-8")
        outputs.append(csv_path)
        if output_format == "svg":
            svg_path = Path(f"{stem}.svg")
            svg_path.write_text(histogram_svg(result, title=label or Path(result.source).name), encoding="utf-8")
            outputs.append(svg_path)
    outputs.append(write_qreport(report, f"{out_prefix}.qreport.txt"))
    write_manifest(out_prefix, command_line, inputs, outputs, started)
    logger.info(f"Q = {format_display(report.q_mean)} +/- {format_display(report.q_std)} over {len(report.per_iteration_q)} iteration(s)")
    return report


def cmd_report(qreport_paths: Sequence[PathLike], manifest_paths: Sequence[PathLike] = ()) -> str:
    """Summaries of Q reports; raises DataError when a manifest no longer matches its inputs."""
    lines: List[str] = []
    for path in qreport_paths:
        report = read_qreport(path)
        sigmas = report.classical_violation_sigmas
        line = f"{path}: Q = {format_display(report.q_mean)} +/- {format_display(report.q_std)} ({len(report.per_iteration_q)} iterations)"
        if sigmas is not None and sigmas > 0:
            line += f", {sigmas:.1f} sigma below the classical bound"
        lines.append(line)
    problems: List[str] = []
    for path in manifest_paths:
        found = verify_manifest(path)
        problems += [f"{path}: {p}" for p in found]
        lines.append(f"{path}: {'OK' if not found else f'{len(found)} problem(s)'}")
    summary = "\n".join(lines)
    if problems:
        raise DataError("manifest verification failed:\n" + "\n".join(problems))
    return summary


def cmd_sweep_oam(
    config_path: PathLike,
    out_prefix: PathLike,
    orders: Sequence[int] = (0, 1, 2, 3),
    iterations: int = 10,
    window_slots: int = DEFAULT_WINDOW_SLOTS,
    window_mode: str = WindowMode.SYMMETRIC.value,
    target_mean: float = DEFAULT_TARGET_MEAN,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    window_s: Optional[float] = None,
    command_line: Sequence[str] = (),
) -> List[Tuple[int, int, QReport]]:
    """Heralded Q per pump OAM order; writes one Q report per order and `<prefix>.oam.csv`."""
    started = time.perf_counter()
    base = load_sim_config(config_path)
    if base.kind is not SourceKind.SPDC_PAIR:
        raise ArgumentError("sweep-oam needs an spdc_pair config")
    if iterations < 1:
        raise ArgumentError(f"iterations must be >= 1, got {iterations}")
    window = _resolve_window(window_slots, window_s, base.resolution_s)
    _prepare(out_prefix)

    rows: List[Tuple[int, int, QReport]] = []
    outputs: List[Path] = []
    warnings: List[str] = []
    for order in orders:
        overrides: Dict[str, object] = {"pump_oam_order": order}
        if seed is not None:
            overrides["rng_seed"] = seed
        cfg = SimConfig(**{**base.model_dump(), **overrides})
        warnings += [f"l={order}: {w}" for w in saturation_warnings(cfg)]
        with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
            runs = list(pool.map(lambda i: simulate_iteration(cfg, i, threads=1), range(iterations)))
        heralded = [herald(r["signal"], r["idler"], window, window_mode) for r in runs]
        report = analyze_iterations(heralded, target_mean=target_mean, threads=threads, label=f"l={order}", rng_algorithm=RNG_ALGORITHM)
        outputs.append(write_qreport(report, f"{out_prefix}.l{order}.qreport.txt"))
        rows.append((order, sum(s.event_count for s in heralded), report))

    table = Path(f"{out_prefix}.oam.csv")
    lines = ["order,heralded_events,q_mean,q_std"]
    lines += [f"{order},{events},{format_float(r.q_mean)},{format_float(r.q_std)}" for order, events, r in rows]
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append(table)
    write_manifest(out_prefix, command_line, [config_path], outputs, started, base, warnings)
    return rows


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def _add_window_options(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group()
    group.add_argument("--window", type=int, default=DEFAULT_WINDOW_SLOTS, help="Coincidence window in slots")
    group.add_argument("--window-s", type=float, help="Coincidence window in seconds, rounded to slots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="photonstat",
        description="photonstat - photon-number statistics and Mandel Q from detector event series",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s simulate heralded.cfg --out runs/hsps --iterations 10
  %(prog)s stats runs/hsps.iter*.signal.ev --herald runs/hsps.iter*.idler.ev --out runs/hsps
  %(prog)s --format svg stats runs/coherent.iter*.ev --out runs/coherent
  %(prog)s report runs/hsps.qreport.txt --manifest runs/hsps.manifest.json

Environment variables:
  PHOTONSTAT_THREADS      Worker threads (fallback for --threads)
  PHOTONSTAT_FORMAT       Histogram export format, csv or svg
  PHOTONSTAT_CHUNK_SLOTS  Chunk size used by digitize
  DEBUG                   Enable debug logs
        """,
    )
    parser.add_argument("--seed", type=int, help="Override rng_seed of a simulation config")
    parser.add_argument("--threads", type=int, help="Worker threads (also PHOTONSTAT_THREADS)")
    parser.add_argument("--format", choices=["csv", "svg"], help="Histogram export format")
    parser.add_argument("--debug", action="store_true", help="Enable debug logs")
    parser.add_argument("--version", action="version", version=f"photonstat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate event series from a simulation config")
    p.add_argument("config", help="key = value simulation config")
    p.add_argument("--out", required=True, help="Output prefix")
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--emit-trace", action="store_true", help="Also write synthetic RAWF32 TTL traces")

    p = sub.add_parser("digitize", help="Convert an analog trace to an event series")
    p.add_argument("trace", help="CSV or RAWF32 trace file")
    p.add_argument("--out", required=True, help="Output event file")
    p.add_argument("--threshold-high", type=float, default=DEFAULT_THRESHOLD_HIGH)
    p.add_argument("--threshold-low", type=float, default=DEFAULT_THRESHOLD_LOW)
    p.add_argument("--mode", choices=[m.value for m in DigitizeMode], default=DigitizeMode.HYSTERESIS.value)
    p.add_argument("--trace-format", choices=[f.value for f in TraceFormat], help="Skip format sniffing")

    for name, help_text in (("herald", "Extract the heralded (coincidence) series"), ("stats", "Histograms and Mandel Q")):
        p = sub.add_parser(name, help=help_text)
        if name == "herald":
            p.add_argument("signal")
            p.add_argument("idler")
        else:
            p.add_argument("events", nargs="+", help="Event files, one per iteration")
            p.add_argument("--herald", nargs="+", metavar="IDLER", help="Idler files paired with the event files")
            p.add_argument("--target-mean", type=float, default=DEFAULT_TARGET_MEAN)
            p.add_argument("--bin-width", type=int, help="Fixed bin width in slots (skips calibration)")
            p.add_argument("--label", default="")
        p.add_argument("--out", required=True, help="Output path or prefix")
        _add_window_options(p)
        p.add_argument("--window-mode", choices=[m.value for m in WindowMode], default=WindowMode.SYMMETRIC.value)

    p = sub.add_parser("report", help="Summarize Q reports and verify manifests")
    p.add_argument("qreports", nargs="*")
    p.add_argument("--manifest", nargs="+", default=[], help="Manifests to verify")

    p = sub.add_parser("sweep-oam", help="Heralded Q for several pump OAM orders")
    p.add_argument("config", help="spdc_pair simulation config")
    p.add_argument("--out", required=True, help="Output prefix")
    p.add_argument("--orders", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--iterations", type=int, default=10)
    _add_window_options(p)
    p.add_argument("--window-mode", choices=[m.value for m in WindowMode], default=WindowMode.SYMMETRIC.value)
    p.add_argument("--target-mean", type=float, default=DEFAULT_TARGET_MEAN)
    return parser


def run(argv: Sequence[str]) -> int:
    """Parse arguments, dispatch, and map errors to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    command_line = ["photonstat", *argv]

    try:
        ensure_valid_config()
        if args.debug:
            config.debug = True
            logging.getLogger().setLevel(logging.DEBUG)
        threads = resolve_threads(args.threads)
        output_format = args.format or config.output_format

        if args.command == "simulate":
            cmd_simulate(args.config, args.out, args.iterations, args.seed, threads, args.emit_trace, command_line)
        elif args.command == "digitize":
            cmd_digitize(args.trace, args.out, args.threshold_high, args.threshold_low, args.mode,
                         args.trace_format, threads, command_line)
        elif args.command == "herald":
            cmd_herald(args.signal, args.idler, args.out, args.window, args.window_mode,
                       window_s=args.window_s, command_line=command_line)
        elif args.command == "stats":
            report = cmd_stats(args.events, args.out, args.herald, args.window, args.window_mode, args.target_mean,
                               args.bin_width, output_format, threads, args.label,
                               window_s=args.window_s, command_line=command_line)
            print(qreport_text(report), end="")
        elif args.command == "report":
            print(cmd_report(args.qreports, args.manifest))
        elif args.command == "sweep-oam":
            rows = cmd_sweep_oam(args.config, args.out, args.orders, args.iterations, args.window, args.window_mode,
                                 args.target_mean, args.seed, threads,
                                 window_s=args.window_s, command_line=command_line)
            for order, events, report in rows:
                print(f"l={order}: heralded events {events}, Q = {format_display(report.q_mean)} +/- {format_display(report.q_std)}")
        return EXIT_OK
    except CalibrationError as e:
        logger.error(format_error(e, args.command))
        return EXIT_STATISTICS
    except (ArgumentError, ValidationError) as e:
        logger.error(format_error(e, args.command))
        return EXIT_ARGUMENT
    except (TraceFormatError, DataError, OSError) as e:
        logger.error(format_error(e, args.command))
        return EXIT_DATA
    except PhotonstatError as e:
        logger.error(format_error(e, args.command))
        return EXIT_DATA


def main() -> None:
    """Entry point for the photonstat command."""
    logging.basicConfig(
        level=logging.DEBUG if config.debug else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        sys.exit(run(sys.argv[1:]))
    except KeyboardInterrupt:
        logger.info("Interrupted")
        sys.exit(130)


if __name__ == "__main__":
    main()
