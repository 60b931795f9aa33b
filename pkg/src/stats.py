"""Photon-number statistics: binning, heralding, histograms and Mandel Q reports."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path
from statistics import fmean
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats as sps

from .errors import ArgumentError, CalibrationError, TraceFormatError
from .models import CountHistogram, EventSeries, IterationResult, QReport, WindowMode
from .utils import PathLike, format_display, format_float, log_file_io, resolve_threads

logger = logging.getLogger(__name__)

DEFAULT_TARGET_MEAN = 1.0
DEFAULT_WINDOW_SLOTS = 1
QREPORT_MAGIC = "# photonstat-qreport v1"
HISTOGRAM_MAGIC = "# photonstat-histogram v1"

_SCAN_CHUNK = 1 << 20


def _check_bin_width(bin_width_slots: int) -> int:
    if isinstance(bin_width_slots, bool) or int(bin_width_slots) != bin_width_slots or bin_width_slots < 1:
        raise ArgumentError(f"bin width must be a positive integer, got {bin_width_slots}")
    return int(bin_width_slots)


# ============================================================================
# BINNING
# ============================================================================

def bin_counts(series: EventSeries, bin_width_slots: int) -> np.ndarray:
    """Events per bin of `bin_width_slots`; a trailing partial bin is dropped."""
    width = _check_bin_width(bin_width_slots)
    n_bins = series.length // width
    if n_bins == 0:
        return np.zeros(0, dtype=np.int64)
    slots = series.event_slots()
    covered = slots[:np.searchsorted(slots, n_bins * width)]
    return np.bincount(covered // width, minlength=n_bins).astype(np.int64)


def calibrate_bin_width(series: EventSeries, target_mean: float = DEFAULT_TARGET_MEAN) -> int:
    """Bin width whose mean count is closest to `target_mean` (ties -> smaller width).

    Every width in 1..length is a candidate. Widths that provably cannot beat
    the current best are skipped: mean(w) <= E / (L // w) bounds the small
    widths, and mean(w) >= H * w / L (H = events in the first half) bounds
    the large ones.
    """
    if not math.isfinite(target_mean) or target_mean <= 0:
        raise ArgumentError(f"target mean must be positive, got {target_mean}")
    slots = series.event_slots()
    n_events = int(slots.size)
    length = series.length
    if n_events == 0:
        raise CalibrationError("series has no events; no bin width reaches the target mean")

    def errors(widths: np.ndarray) -> np.ndarray:
        n_bins = length // widths
        counts = np.searchsorted(slots, n_bins * widths)
        return np.abs(counts / n_bins - target_mean)

    target = Fraction(target_mean)

    def exact_error(width: int) -> Fraction:
        n_bins = length // width
        return abs(Fraction(int(np.searchsorted(slots, n_bins * width)), n_bins) - target)

    # float errors only shortlist candidates; exact errors decide
    tol = 1e-9 * max(1.0, target_mean)
    guess = min(max(int(round(target_mean * length / n_events)), 1), length)
    best_w = guess
    best_exact = exact_error(guess)
    best_err = float(best_exact)

    low = 1
    if target_mean - best_err > 0:
        max_bins = int(n_events / (target_mean - best_err)) + 1
        low = max(1, length // (max_bins + 1))
    first_half = int(np.searchsorted(slots, -(-length // 2)))
    high = length
    if first_half > target_mean + best_err:
        high = min(length // 2, int((target_mean + best_err) * length / first_half) + 1)
    high = max(high, low)
    logger.debug(f"calibrate: {n_events} events in {length} slots, scanning widths {low}..{high}")

    for start in range(low, high + 1, _SCAN_CHUNK):
        widths = np.arange(start, min(start + _SCAN_CHUNK, high + 1), dtype=np.int64)
        err = errors(widths)
        if float(err.min()) > best_err + tol:
            continue
        for width in widths[err <= min(best_err, float(err.min())) + tol].tolist():
            candidate = exact_error(width)
            if candidate < best_exact or (candidate == best_exact and width < best_w):
                best_w, best_exact = width, candidate
        best_err = float(best_exact)
    return best_w


# ============================================================================
# HERALDING
# ============================================================================

def herald(
    signal: EventSeries,
    idler: EventSeries,
    window_slots: int = DEFAULT_WINDOW_SLOTS,
    mode: Union[WindowMode, str] = WindowMode.SYMMETRIC,
) -> EventSeries:
    """Signal events with an idler event inside the coincidence window.

    Symmetric: idler in [k - w, k + w]. Forward: idler in [k - w, k], the
    herald at or before the heralded photon. Output timestamps follow the
    signal arm; one idler event may herald several signal events.
    """
    mode = WindowMode(mode)
    if isinstance(window_slots, bool) or int(window_slots) != window_slots or window_slots < 0:
        raise ArgumentError(f"window must be a non-negative integer, got {window_slots}")
    if not math.isclose(signal.resolution, idler.resolution, rel_tol=1e-12):
        raise ArgumentError(f"resolution mismatch: signal {signal.resolution}, idler {idler.resolution}")
    if signal.length != idler.length:
        raise ArgumentError(f"length mismatch: signal {signal.length} slots, idler {idler.length} slots")

    s = signal.event_slots()
    i = idler.event_slots()
    if s.size == 0 or i.size == 0:
        return EventSeries.empty(signal.length, signal.resolution, signal.origin)

    w = int(window_slots)
    upper = s + w if mode is WindowMode.SYMMETRIC else s
    j = np.searchsorted(i, s - w, side="left")
    hit = (j < i.size) & (i[np.minimum(j, i.size - 1)] <= upper)
    return EventSeries.from_slots(s[hit], signal.length, signal.resolution, signal.origin)


def window_slots_for(window_s: float, resolution: float) -> int:
    """round(tau_c / resolution)."""
    if not math.isfinite(window_s) or window_s < 0:
        raise ArgumentError(f"coincidence window must be non-negative, got {window_s}")
    return int(round(window_s / resolution))


# ============================================================================
# DISTRIBUTIONS AND MOMENTS
# ============================================================================

def histogram(counts: Sequence[int], bin_width_slots: int) -> CountHistogram:
    """Tally how many bins held exactly n events."""
    width = _check_bin_width(bin_width_slots)
    values = np.asarray(counts, dtype=np.int64)
    if values.size == 0:
        raise ArgumentError("cannot build a histogram from zero bins")
    if values.min() < 0:
        raise ArgumentError("counts must be non-negative")
    tally = np.bincount(values)
    counts_per_n = {int(n): int(c) for n, c in enumerate(tally) if c}
    return CountHistogram(bin_width_slots=width, counts_per_n=counts_per_n, total_bins=int(values.size))


def moments(h: CountHistogram) -> Tuple[float, float]:
    """Population mean and variance of the distribution, summed exactly."""
    total = h.total_bins
    s1 = sum(n * c for n, c in h.counts_per_n.items())
    s2 = sum(n * n * c for n, c in h.counts_per_n.items())
    mean = Fraction(s1, total)
    variance = Fraction(s2 * total - s1 * s1, total * total)
    return float(mean), float(variance)


def mandel_q(mean: float, variance: float) -> float:
    """Q = (variance - mean) / mean."""
    if not math.isfinite(mean) or mean <= 0:
        raise ArgumentError(f"mean must be positive, got {mean}")
    if not math.isfinite(variance) or variance < 0:
        raise ArgumentError(f"variance must be non-negative, got {variance}")
    return (variance - mean) / mean


def aggregate(qs: Sequence[float]) -> Tuple[float, float]:
    """Arithmetic mean and sample (n-1) standard deviation of per-iteration Q."""
    values = np.asarray(qs, dtype=np.float64)
    if values.size < 2:
        raise ArgumentError(f"aggregation needs at least 2 iterations, got {values.size}")
    return float(values.mean()), float(values.std(ddof=1))


def poisson_reference(mean: float, n_max: int) -> np.ndarray:
    """Poisson pmf p(0..n_max) with the given mean."""
    return sps.poisson.pmf(np.arange(n_max + 1), mean)


def thermal_reference(mean: float, n_max: int) -> np.ndarray:
    """Bose-Einstein pmf p(0..n_max): mean^n / (1 + mean)^(n + 1)."""
    return sps.nbinom.pmf(np.arange(n_max + 1), 1, 1.0 / (1.0 + mean))


# ============================================================================
# PIPELINE
# ============================================================================

def analyze_series(
    series: EventSeries,
    target_mean: float = DEFAULT_TARGET_MEAN,
    bin_width: Optional[int] = None,
    index: int = 0,
    source: str = "",
) -> IterationResult:
    """Calibrate (unless `bin_width` is given), bin, histogram and compute Q."""
    width = _check_bin_width(bin_width) if bin_width is not None else calibrate_bin_width(series, target_mean)
    counts = bin_counts(series, width)
    if counts.size == 0:
        raise CalibrationError(f"series of {series.length} slots is shorter than one bin of {width}")
    h = histogram(counts, width)
    mean, variance = moments(h)
    if mean <= 0:
        raise CalibrationError("all bins are empty; Q is undefined")
    q = mandel_q(mean, variance)
    logger.info(f"iteration {index}: w={width} slots, bins={h.total_bins}, mean={mean:.4f}, variance={variance:.4f}, Q={q:.4f}")
    return IterationResult(
        index=index,
        source=source,
        event_count=series.event_count,
        bin_width_slots=width,
        histogram=h,
        mean=mean,
        variance=variance,
        q=q,
    )


def analyze_iterations(
    series_list: Sequence[EventSeries],
    target_mean: float = DEFAULT_TARGET_MEAN,
    bin_width: Optional[int] = None,
    threads: Optional[int] = None,
    label: str = "",
    sources: Optional[Sequence[str]] = None,
    rng_algorithm: Optional[str] = None,
) -> QReport:
    """Per-iteration statistics plus the across-iteration Q summary.

    With a single iteration q_std is NaN (no spread can be estimated).
    """
    if not series_list:
        raise ArgumentError("at least one event series is required")
    names = list(sources) if sources is not None else [""] * len(series_list)
    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        results = list(pool.map(
            lambda item: analyze_series(item[1], target_mean, bin_width, index=item[0], source=names[item[0]]),
            enumerate(series_list),
        ))

    per_q = [r.q for r in results]
    if len(per_q) >= 2:
        q_mean, q_std = aggregate(per_q)
    else:
        logger.warning("single iteration: q_std is undefined")
        q_mean, q_std = per_q[0], float("nan")
    mean = fmean(r.mean for r in results)
    variance = fmean(r.variance for r in results)
    return QReport(
        mean=mean,
        variance=variance,
        q=mandel_q(mean, variance),
        per_iteration_q=per_q,
        q_mean=q_mean,
        q_std=q_std,
        iterations=results,
        label=label,
        rng_algorithm=rng_algorithm,
    )


# ============================================================================
# EXPORTS
# ============================================================================

def histogram_csv(result: IterationResult) -> str:
    """`n,count,probability` rows preceded by `# key=value` header comments."""
    h = result.histogram
    lines = [
        HISTOGRAM_MAGIC,
        f"# bin_width_slots={h.bin_width_slots}",
        f"# total_bins={h.total_bins}",
        f"# mean={format_float(result.mean)}",
        f"# variance={format_float(result.variance)}",
        f"# Q={format_float(result.q)}",
        f"# display: mean={format_display(result.mean)} variance={format_display(result.variance)} Q={format_display(result.q)}",
        "n,count,probability",
    ]
    for n in range(h.n_max + 1):
        count = h.counts_per_n.get(n, 0)
        lines.append(f"{n},{count},{format_float(count / h.total_bins)}")
    return "\n".join(lines) + "\n"


def histogram_svg(result: IterationResult, title: str = "", width: int = 480, height: int = 320) -> str:
    """Self-contained bar chart of p(n) with Poisson and Bose-Einstein references of equal mean."""
    h = result.histogram
    probs = [h.counts_per_n.get(n, 0) / h.total_bins for n in range(h.n_max + 1)]
    reference = poisson_reference(result.mean, h.n_max).tolist()
    thermal = thermal_reference(result.mean, h.n_max).tolist()
    margin = 40
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    top = max(max(probs), max(reference), max(thermal), 1e-12)
    slot = plot_w / len(probs)
    bar_w = slot * 0.7

    def y(p: float) -> float:
        return margin + plot_h * (1 - p / top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">'
        f'{title} mean={format_display(result.mean)} var={format_display(result.variance)} Q={format_display(result.q)}</text>',
        f'<line x1="{margin}" y1="{margin + plot_h}" x2="{margin + plot_w}" y2="{margin + plot_h}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{margin + plot_h}" stroke="black"/>',
    ]
    for n, (p, ref, th) in enumerate(zip(probs, reference, thermal)):
        x = margin + n * slot + (slot - bar_w) / 2
        cx = x + bar_w / 2
        parts.append(
            f'<rect class="bar" x="{x:.2f}" y="{y(p):.2f}" width="{bar_w:.2f}" height="{margin + plot_h - y(p):.2f}" fill="steelblue">'
            f'<title>n={n} p={format_float(p)}</title></rect>'
        )
        parts.append(f'<circle class="poisson" cx="{cx:.2f}" cy="{y(ref):.2f}" r="3" fill="crimson"/>')
        parts.append(
            f'<rect class="thermal" x="{cx - 3:.2f}" y="{y(th) - 3:.2f}" width="6" height="6" fill="none" stroke="darkorange"/>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.2f}" y="{margin + plot_h + 14}" text-anchor="middle" font-family="sans-serif" font-size="10">{n}</text>'
        )
    parts.append(f'<text x="{width / 2:.1f}" y="{height - 6}" text-anchor="middle" font-family="sans-serif" font-size="11">n</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def qreport_text(report: QReport) -> str:
    """Key-value rendering: q_mean, q_std, iterations and one q[i] per iteration."""
    lines = [QREPORT_MAGIC]
    if report.label:
        lines.append(f"label={report.label}")
    lines += [
        f"iterations={len(report.per_iteration_q)}",
        f"q_mean={format_float(report.q_mean)}",
        f"q_std={format_float(report.q_std)}",
        f"mean={format_float(report.mean)}",
        f"variance={format_float(report.variance)}",
        f"q={format_float(report.q)}",
    ]
    sigmas = report.classical_violation_sigmas
    if sigmas is not None:
        lines.append(f"classical_violation_sigmas={format_float(sigmas)}")
    if report.rng_algorithm:
        lines.append(f"rng_algorithm={report.rng_algorithm}")
    for i, q in enumerate(report.per_iteration_q):
        lines.append(f"q[{i}]={format_float(q)}")
    for result in report.iterations:
        lines.append(f"bin_width[{result.index}]={result.bin_width_slots}")
    std_display = format_display(report.q_std) if math.isfinite(report.q_std) else "n/a"
    lines.append(f"summary=Q = {format_display(report.q_mean)} +/- {std_display}")
    return "\n".join(lines) + "\n"


def parse_qreport(text: str) -> QReport:
    """Inverse of `qreport_text` (per-iteration histograms are not stored)."""
    values: Dict[str, str] = {}
    per_q: Dict[int, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise TraceFormatError(f"expected key=value, got {line[:40]!r}", offset=lineno, unit="line")
        if key.startswith("q[") and key.endswith("]"):
            per_q[int(key[2:-1])] = float(value)
        else:
            values[key] = value
    try:
        expected = int(values["iterations"])
        if sorted(per_q) != list(range(expected)):
            raise TraceFormatError(f"expected q[0]..q[{expected - 1}]")
        return QReport(
            mean=float(values["mean"]),
            variance=float(values["variance"]),
            q=float(values["q"]),
            per_iteration_q=[per_q[i] for i in range(expected)],
            q_mean=float(values["q_mean"]),
            q_std=float(values["q_std"]),
            label=values.get("label", ""),
            rng_algorithm=values.get("rng_algorithm"),
        )
    except KeyError as e:
        raise TraceFormatError(f"missing key {e}")


def write_qreport(report: QReport, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(qreport_text(report), encoding="utf-8")
    log_file_io("Wrote Q report", path, f"q_mean={report.q_mean:.4f}")
    return path


def read_qreport(path: PathLike) -> QReport:
    return parse_qreport(Path(path).read_text(encoding="utf-8"))
