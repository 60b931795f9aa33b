#!/usr/bin/env python3
"""
photonstat MCP server

Exposes the photon-statistics pipeline (digitize, herald, histogram, Mandel Q,
simulation) to MCP clients over stdio.
"""

import argparse
import asyncio
import json
import logging
import sys
from contextlib import asynccontextmanager
from datetime import datetime
from typing import Any, AsyncIterator, Dict, List, Optional, TypeVar

from mcp.server.fastmcp import FastMCP
from pydantic import BaseModel, Field, ValidationError, field_validator

from . import __version__
from .config import config, ensure_valid_config
from .errors import ArgumentError, PhotonstatError
from .events import DEFAULT_THRESHOLD_HIGH, DEFAULT_THRESHOLD_LOW, read_events_file
from .models import DigitizeMode, SourceKind, WindowMode
from .photonstat_cli import cmd_digitize, cmd_herald
from .sim import RNG_ALGORITHM, parse_sim_config, saturation_warnings, simulate_iteration
from .stats import (
    DEFAULT_TARGET_MEAN,
    DEFAULT_WINDOW_SLOTS,
    analyze_iterations,
    herald,
    histogram,
    mandel_q,
    moments,
    qreport_text,
    read_qreport,
)
from .utils import format_display, format_error

# ============================================================================
# INPUT VALIDATION MODELS
# ============================================================================

class CountsRequest(BaseModel):
    """Per-bin event counts for a direct Q computation."""
    counts: List[int] = Field(..., min_length=1, description="Event count of each bin")
    bin_width_slots: int = Field(default=1, ge=1, description="Bin width the counts were taken with")

    @field_validator('counts')
    @classmethod
    def validate_counts(cls, v: List[int]) -> List[int]:
        if any(c < 0 for c in v):
            raise ValueError("counts must be non-negative")
        return v


class WindowMixin(BaseModel):
    """Coincidence window parameters."""
    window_slots: int = Field(default=DEFAULT_WINDOW_SLOTS, ge=0, description="Coincidence half-window in slots")
    window_mode: WindowMode = Field(default=WindowMode.SYMMETRIC, description="symmetric or forward")


class SimulateRequest(WindowMixin):
    config_text: str = Field(..., min_length=1, description="key = value simulation config")
    iterations: int = Field(default=2, ge=1, le=100, description="Independent iterations")
    target_mean: float = Field(default=DEFAULT_TARGET_MEAN, gt=0)


class AnalyzeRequest(WindowMixin):
    event_paths: List[str] = Field(..., min_length=1, description="PHSEVNT1 files, one per iteration")
    idler_paths: Optional[List[str]] = Field(default=None, description="Idler files paired with event_paths")
    target_mean: float = Field(default=DEFAULT_TARGET_MEAN, gt=0)
    bin_width: Optional[int] = Field(default=None, ge=1, description="Fixed bin width (skips calibration)")


class HeraldRequest(WindowMixin):
    signal_path: str
    idler_path: str
    out_path: str


class DigitizeRequest(BaseModel):
    trace_path: str
    out_path: str
    threshold_high: float = DEFAULT_THRESHOLD_HIGH
    threshold_low: float = DEFAULT_THRESHOLD_LOW
    mode: DigitizeMode = DigitizeMode.HYSTERESIS


T = TypeVar('T', bound=BaseModel)

def validate_input(data: Dict[str, Any], model_class: type[T]) -> T:
    """Validate input data against a pydantic model."""
    try:
        return model_class(**data)
    except ValidationError as e:
        error_details: List[str] = []
        for error in e.errors():
            field = " -> ".join(str(x) for x in error['loc'])
            error_details.append(f"Field '{field}': {error['msg']}")
        raise ArgumentError("Invalid input:\n" + "\n".join(error_details))


logging.basicConfig(level=logging.DEBUG if config.debug else logging.INFO)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def server_lifespan(server: FastMCP) -> AsyncIterator[Dict[str, Any]]:
    logger.info("Starting photonstat MCP server")
    try:
        tools = await server.list_tools()
        logger.info(f"Registered tools ({len(tools)}): {', '.join(t.name for t in tools)}")
    except Exception as e:
        logger.error(f"Could not list tools: {e}")
    try:
        yield {"start_time": datetime.now(), "version": __version__}
    finally:
        logger.info("Stopping photonstat MCP server")


mcp = FastMCP(name="photonstat", lifespan=server_lifespan)

# ============================================================================
# TOOLS
# ============================================================================

@mcp.tool()
async def compute_mandel_q(counts: List[int], bin_width_slots: int = 1) -> str:
    """
    Histogram a list of per-bin event counts and compute the Mandel Q-parameter.

    Q = (variance - mean) / mean: 0 for Poisson (coherent) light, > 0 for
    bunched (thermal) light, < 0 for sub-Poissonian (non-classical) light.

    Returns:
        str: JSON with counts_per_n, mean, variance and q
    """
    try:
        request = validate_input({"counts": counts, "bin_width_slots": bin_width_slots}, CountsRequest)
        h = histogram(request.counts, request.bin_width_slots)
        mean, variance = moments(h)
        result = {
            "counts_per_n": h.counts_per_n,
            "total_bins": h.total_bins,
            "mean": mean,
            "variance": variance,
            "q": mandel_q(mean, variance),
        }
        return json.dumps(result, indent=2)
    except PhotonstatError as e:
        logger.error(f"compute_mandel_q failed: {e}")
        return format_error(e, "computing Q")
    except Exception as e:
        logger.error(f"Unexpected error in compute_mandel_q: {e}")
        return format_error(e, "computing Q")


@mcp.tool()
async def simulate_source(
    config_text: str,
    iterations: int = 2,
    window_slots: int = DEFAULT_WINDOW_SLOTS,
    window_mode: str = WindowMode.SYMMETRIC.value,
    target_mean: float = DEFAULT_TARGET_MEAN,
) -> str:
    """
    Run the detection-chain simulator in memory and report Q.

    `config_text` uses the `key = value` simulation config format
    (kind, duration_s, photon_rate_hz or pair_rate_hz, efficiencies,
    dark_rate_hz, dead_time_s, pump_oam_order, rng_seed, ...). For
    spdc_pair sources the heralded (coincidence) stream is analyzed.

    Returns:
        str: Q report text followed by any saturation warnings
    """
    try:
        request = validate_input(
            {
                "config_text": config_text,
                "iterations": iterations,
                "window_slots": window_slots,
                "window_mode": window_mode,
                "target_mean": target_mean,
            },
            SimulateRequest,
        )
        cfg = parse_sim_config(request.config_text)

        def run() -> str:
            series = []
            for i in range(request.iterations):
                arms = simulate_iteration(cfg, i)
                if cfg.kind is SourceKind.SPDC_PAIR:
                    series.append(herald(arms["signal"], arms["idler"], request.window_slots, request.window_mode))
                else:
                    series.append(arms[""])
            report = analyze_iterations(
                series, target_mean=request.target_mean, label=cfg.kind.value, rng_algorithm=RNG_ALGORITHM
            )
            return qreport_text(report)

        text = await asyncio.to_thread(run)
        warnings = saturation_warnings(cfg)
        if warnings:
            text += "\nWarnings:\n" + "\n".join(f"- {w}" for w in warnings)
        return text
    except PhotonstatError as e:
        logger.error(f"simulate_source failed: {e}")
        return format_error(e, "simulating")
    except Exception as e:
        logger.error(f"Unexpected error in simulate_source: {e}")
        return format_error(e, "simulating")


@mcp.tool()
async def analyze_event_files(
    event_paths: List[str],
    idler_paths: Optional[List[str]] = None,
    window_slots: int = DEFAULT_WINDOW_SLOTS,
    window_mode: str = WindowMode.SYMMETRIC.value,
    target_mean: float = DEFAULT_TARGET_MEAN,
    bin_width: Optional[int] = None,
) -> str:
    """
    Histogram PHSEVNT1 event files (one per iteration) and aggregate Q.

    When `idler_paths` is given, each event file is heralded by the idler
    file at the same position before binning.

    Returns:
        str: Q report text (per-iteration Q, q_mean, q_std)
    """
    try:
        request = validate_input(
            {
                "event_paths": event_paths,
                "idler_paths": idler_paths,
                "window_slots": window_slots,
                "window_mode": window_mode,
                "target_mean": target_mean,
                "bin_width": bin_width,
            },
            AnalyzeRequest,
        )
        if request.idler_paths is not None and len(request.idler_paths) != len(request.event_paths):
            raise ArgumentError(f"{len(request.event_paths)} event files but {len(request.idler_paths)} idler files")

        def run() -> str:
            series = [read_events_file(p) for p in request.event_paths]
            if request.idler_paths:
                idlers = [read_events_file(p) for p in request.idler_paths]
                series = [herald(s, i, request.window_slots, request.window_mode) for s, i in zip(series, idlers)]
            report = analyze_iterations(
                series, target_mean=request.target_mean, bin_width=request.bin_width, sources=request.event_paths
            )
            return qreport_text(report)

        return await asyncio.to_thread(run)
    except PhotonstatError as e:
        logger.error(f"analyze_event_files failed: {e}")
        return format_error(e, "analyzing event files")
    except Exception as e:
        logger.error(f"Unexpected error in analyze_event_files: {e}")
        return format_error(e, "analyzing event files")


@mcp.tool()
async def herald_event_files(
    signal_path: str,
    idler_path: str,
    out_path: str,
    window_slots: int = DEFAULT_WINDOW_SLOTS,
    window_mode: str = WindowMode.SYMMETRIC.value,
) -> str:
    """
    Keep the signal events with an idler event inside the coincidence window
    and write the heralded series to `out_path` (plus a run manifest).
    """
    try:
        request = validate_input(
            {
                "signal_path": signal_path,
                "idler_path": idler_path,
                "out_path": out_path,
                "window_slots": window_slots,
                "window_mode": window_mode,
            },
            HeraldRequest,
        )
        series = await asyncio.to_thread(
            cmd_herald,
            request.signal_path,
            request.idler_path,
            request.out_path,
            request.window_slots,
            request.window_mode.value,
            command_line=["photonstat-server", "herald_event_files"],
        )
        return f"Wrote {request.out_path}: {series.event_count} heralded events over {series.length} slots"
    except PhotonstatError as e:
        logger.error(f"herald_event_files failed: {e}")
        return format_error(e, "heralding")
    except Exception as e:
        logger.error(f"Unexpected error in herald_event_files: {e}")
        return format_error(e, "heralding")


@mcp.tool()
async def digitize_trace_file(
    trace_path: str,
    out_path: str,
    threshold_high: float = DEFAULT_THRESHOLD_HIGH,
    threshold_low: float = DEFAULT_THRESHOLD_LOW,
    mode: str = DigitizeMode.HYSTERESIS.value,
) -> str:
    """Digitize a CSV or RAWF32 trace into a PHSEVNT1 event file."""
    try:
        request = validate_input(
            {
                "trace_path": trace_path,
                "out_path": out_path,
                "threshold_high": threshold_high,
                "threshold_low": threshold_low,
                "mode": mode,
            },
            DigitizeRequest,
        )
        series = await asyncio.to_thread(
            cmd_digitize,
            request.trace_path,
            request.out_path,
            request.threshold_high,
            request.threshold_low,
            request.mode.value,
            None,
            None,
            ["photonstat-server", "digitize_trace_file"],
        )
        return f"Wrote {request.out_path}: {series.event_count} events over {series.length} slots"
    except PhotonstatError as e:
        logger.error(f"digitize_trace_file failed: {e}")
        return format_error(e, "digitizing")
    except Exception as e:
        logger.error(f"Unexpected error in digitize_trace_file: {e}")
        return format_error(e, "digitizing")

# ============================================================================
# RESOURCES
# ============================================================================

@mcp.resource("qreport://{path}")
async def get_qreport(path: str) -> str:
    """Summary of a Q report file."""
    try:
        report = read_qreport(path)
        lines = [
            f"Q report {report.label or path}",
            f"Iterations: {len(report.per_iteration_q)}",
            f"Q: {format_display(report.q_mean)} +/- {format_display(report.q_std)}",
            f"Pooled mean: {format_display(report.mean)}, variance: {format_display(report.variance)}",
        ]
        sigmas = report.classical_violation_sigmas
        if sigmas is not None:
            lines.append(f"Distance from the classical bound: {sigmas:.1f} standard deviations")
        return "\n".join(lines)
    except Exception as e:
        logger.error(f"Error reading Q report {path}: {e}")
        return format_error(e, "reading Q report")

# ============================================================================
# PROMPTS
# ============================================================================

@mcp.prompt()
def interpret_q_report(report_text: str) -> str:
    """Template for interpreting a Q report."""
    return f"""Interpret the following photon-statistics report:

{report_text}

Explain:
1. Which regime the light is in: Q near 0 (Poissonian, coherent), Q > 0
   (super-Poissonian, bunched or thermal) or Q < 0 (sub-Poissonian).
2. Whether q_mean is significantly different from 0 given q_std, and how
   many standard deviations separate it from the classical bound.
3. Whether detector effects (dead time, dark counts, finite efficiency)
   could explain the observed value.
4. What to change in the measurement to sharpen the result."""

# ============================================================================
# ENTRY POINT
# ============================================================================

def main() -> None:
    """Entry point for the photonstat MCP server."""
    parser = argparse.ArgumentParser(
        description="photonstat MCP server - photon-number statistics over the Model Context Protocol",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s
  %(prog)s --threads 4 --debug

Environment variables:
  PHOTONSTAT_THREADS      Worker threads used by the analysis tools
  DEBUG                   Enable debug logs
        """,
    )
    parser.add_argument("--threads", type=int, help="Worker threads (also PHOTONSTAT_THREADS)")
    parser.add_argument("--debug", action="store_true", help="Enable debug logs")
    parser.add_argument("--version", action="version", version=f"photonstat MCP server {__version__}")
    args = parser.parse_args()

    try:
        ensure_valid_config()
    except ArgumentError as e:
        logger.error(format_error(e, "configuration"))
        sys.exit(2)

    if args.threads:
        config.threads = args.threads
    if args.debug:
        config.debug = True
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        mcp.run(transport="stdio")
    except KeyboardInterrupt:
        logger.info("Server stopped")
    except Exception as e:
        logger.error(f"Fatal error: {e}")
        raise


if __name__ == "__main__":
    main()
