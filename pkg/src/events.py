"""Detector waveforms to binary detection-event series.

Covers the two trace file formats, the PHSEVNT1 event-series format, onset
detection (`digitize`) and non-paralyzable dead-time enforcement.
"""

import bisect
import io
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import BinaryIO, List, Optional, Tuple, Union

import numpy as np

from .config import config
from .errors import ArgumentError, DataError, TraceFormatError
from .models import WORD_BITS, AnalogTrace, DigitizeMode, EventSeries, TraceFormat, pack_bits
from .utils import PathLike, log_file_io, resolve_threads

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD_HIGH = 1.5
DEFAULT_THRESHOLD_LOW = 0.5

TRACE_CSV_MAGIC = "# photonstat-trace v1"
TRACE_RAW_MAGIC = b"PHSTRACE"
TRACE_RAW_VERSION = 1
# magic, version, reserved u16, reserved u32
_RAW_PREFIX = struct.Struct("<8sHHI")
# sample_period_s, sample count
_RAW_HEADER = struct.Struct("<dQ")
_RAW_DATA_OFFSET = _RAW_PREFIX.size + _RAW_HEADER.size

EVENTS_MAGIC = b"PHSEVNT1"
# magic, resolution_s, origin_s, slot count
_EVENTS_HEADER = struct.Struct("<8sddQ")

Source = Union[bytes, bytearray, BinaryIO]


def _as_stream(source: Source) -> BinaryIO:
    if isinstance(source, (bytes, bytearray)):
        return io.BytesIO(source)
    return source


def _remaining_bytes(stream: BinaryIO) -> Optional[int]:
    """Bytes left after the current position, or None for unseekable streams."""
    try:
        if not stream.seekable():
            return None
        here = stream.tell()
        end = stream.seek(0, io.SEEK_END)
        stream.seek(here)
    except (AttributeError, OSError):
        return None
    return end - here


def _read_payload(stream: BinaryIO, size: int, offset: int, declared: str) -> bytes:
    """Read exactly `size` bytes after a header; the size is checked before allocating."""
    remaining = _remaining_bytes(stream)
    if remaining is not None:
        if remaining < size:
            raise TraceFormatError(f"{declared}, file holds {remaining} payload bytes", offset=offset + remaining)
        if remaining > size:
            raise TraceFormatError("trailing data after payload", offset=offset + size)
        return stream.read(size)

    payload = bytearray()
    while len(payload) < size:
        block = stream.read(min(size - len(payload), 1 << 24))
        if not block:
            raise TraceFormatError(f"{declared}, file holds {len(payload)} payload bytes", offset=offset + len(payload))
        payload += block
    if stream.read(1):
        raise TraceFormatError("trailing data after payload", offset=offset + size)
    return bytes(payload)


# ============================================================================
# TRACE FILES
# ============================================================================

def parse_trace(source: Source, fmt: Union[TraceFormat, str]) -> AnalogTrace:
    """Decode a CSV or RAWF32 trace exactly as encoded (no resampling)."""
    fmt = TraceFormat(fmt)
    stream = _as_stream(source)
    if fmt is TraceFormat.RAWF32:
        return _parse_rawf32(stream)
    return _parse_csv(stream)


def _parse_csv(stream: BinaryIO) -> AnalogTrace:
    data = stream.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 3:
        raise TraceFormatError("header must have 3 lines followed by samples", offset=len(parts), unit="line")
    if len(parts) == 3:
        parts.append(b"")
    try:
        header = [p.decode("utf-8").strip() for p in parts[:3]]
    except UnicodeDecodeError as e:
        raise TraceFormatError(f"header is not UTF-8: {e}", offset=1, unit="line")

    if header[0] != TRACE_CSV_MAGIC:
        raise TraceFormatError(f"expected '{TRACE_CSV_MAGIC}', got '{header[0]}'", offset=1, unit="line")

    key, sep, value = header[1].partition("=")
    if key.strip() != "sample_period_s" or not sep:
        raise TraceFormatError("expected 'sample_period_s=<float>'", offset=2, unit="line")
    try:
        sample_period = float(value)
    except ValueError:
        raise TraceFormatError(f"invalid sample period '{value}'", offset=2, unit="line")
    if not math.isfinite(sample_period) or sample_period <= 0:
        raise TraceFormatError(f"sample period must be positive and finite, got {value}", offset=2, unit="line")

    key, sep, channel = header[2].partition("=")
    if key.strip() != "channel" or not sep:
        raise TraceFormatError("expected 'channel=<text>'", offset=3, unit="line")

    body = parts[3]
    if not body.strip():
        raise TraceFormatError("empty sample section", offset=4, unit="line")
    try:
        samples = np.loadtxt(io.BytesIO(body), dtype=np.float64, ndmin=1, comments=None)
    except ValueError as e:
        _raise_bad_csv_line(body, first_line=4)
        raise TraceFormatError(f"invalid sample section: {e}", offset=4, unit="line")
    _check_finite(samples, first_line=4)
    return AnalogTrace(sample_period=sample_period, samples=samples, channel_label=channel)


def _raise_bad_csv_line(body: bytes, first_line: int) -> None:
    for lineno, raw in enumerate(body.splitlines(), start=first_line):
        token = raw.strip()
        if not token:
            continue
        try:
            # float() accepts digit separators, loadtxt does not
            if b"_" in token:
                raise ValueError(token)
            float(token)
        except ValueError:
            raise TraceFormatError(f"invalid sample value {token[:40]!r}", offset=lineno, unit="line")


def _check_finite(samples: np.ndarray, first_line: Optional[int] = None) -> None:
    bad = np.flatnonzero(~np.isfinite(samples))
    if bad.size:
        index = int(bad[0])
        where = f"line {first_line + index}" if first_line is not None else f"byte {_RAW_DATA_OFFSET + 4 * index}"
        raise DataError(f"non-finite sample {samples[index]} at index {index} ({where})")


def _parse_rawf32(stream: BinaryIO) -> AnalogTrace:
    head = stream.read(_RAW_DATA_OFFSET)
    if len(head) < _RAW_PREFIX.size:
        raise TraceFormatError("truncated header", offset=len(head))
    magic, version, _, _ = _RAW_PREFIX.unpack_from(head, 0)
    if magic != TRACE_RAW_MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {TRACE_RAW_MAGIC!r}", offset=0)
    if version != TRACE_RAW_VERSION:
        raise TraceFormatError(f"unsupported version {version}", offset=8)
    if len(head) < _RAW_DATA_OFFSET:
        raise TraceFormatError("truncated header", offset=len(head))
    sample_period, count = _RAW_HEADER.unpack_from(head, _RAW_PREFIX.size)
    if not math.isfinite(sample_period) or sample_period <= 0:
        raise TraceFormatError(f"sample period must be positive and finite, got {sample_period}", offset=16)
    if count == 0:
        raise TraceFormatError("empty sample section", offset=24)

    payload = _read_payload(stream, count * 4, _RAW_DATA_OFFSET, f"header declares {count} samples")
    samples = np.frombuffer(payload, dtype="<f4")
    _check_finite(samples)
    return AnalogTrace(sample_period=sample_period, samples=samples, channel_label="")


def write_trace(trace: AnalogTrace, sink: BinaryIO, fmt: Union[TraceFormat, str]) -> None:
    """Encode a trace; RAWF32 stores samples as float32, CSV keeps full precision."""
    fmt = TraceFormat(fmt)
    _check_finite(trace.samples)
    if fmt is TraceFormat.RAWF32:
        sink.write(_RAW_PREFIX.pack(TRACE_RAW_MAGIC, TRACE_RAW_VERSION, 0, 0))
        sink.write(_RAW_HEADER.pack(trace.sample_period, len(trace)))
        sink.write(np.ascontiguousarray(trace.samples, dtype="<f4").tobytes())
        return

    if "\n" in trace.channel_label or "\r" in trace.channel_label:
        raise ArgumentError("channel label must be a single line")
    header = f"{TRACE_CSV_MAGIC}\nsample_period_s={trace.sample_period!r}\nchannel={trace.channel_label}\n"
    sink.write(header.encode("utf-8"))
    np.savetxt(sink, np.asarray(trace.samples, dtype=np.float64), fmt="%.17g")


def sniff_trace_format(path: PathLike) -> TraceFormat:
    with open(path, "rb") as handle:
        magic = handle.read(len(TRACE_RAW_MAGIC))
    return TraceFormat.RAWF32 if magic == TRACE_RAW_MAGIC else TraceFormat.CSV


def read_trace(path: PathLike, fmt: Optional[Union[TraceFormat, str]] = None) -> AnalogTrace:
    """Read a trace file; the format is sniffed from its first bytes when not given."""
    fmt = TraceFormat(fmt) if fmt is not None else sniff_trace_format(path)
    with open(path, "rb") as handle:
        trace = parse_trace(handle, fmt)
    log_file_io("Read trace", path, f"{fmt.value}, {len(trace)} samples")
    return trace


def write_trace_file(trace: AnalogTrace, path: PathLike, fmt: Union[TraceFormat, str] = TraceFormat.RAWF32) -> Path:
    path = Path(path)
    with open(path, "wb") as handle:
        write_trace(trace, handle, fmt)
    log_file_io("Wrote trace", path, f"{TraceFormat(fmt).value}, {len(trace)} samples")
    return path


# ============================================================================
# EVENT-SERIES FILES (PHSEVNT1)
# ============================================================================

def write_events(series: EventSeries, sink: BinaryIO) -> None:
    sink.write(_EVENTS_HEADER.pack(EVENTS_MAGIC, series.resolution, series.origin, series.length))
    sink.write(np.ascontiguousarray(series.words, dtype="<u8").tobytes())


def read_events(source: Source) -> EventSeries:
    stream = _as_stream(source)
    head = stream.read(_EVENTS_HEADER.size)
    if len(head) < _EVENTS_HEADER.size:
        raise TraceFormatError("truncated event-series header", offset=len(head))
    magic, resolution, origin, length = _EVENTS_HEADER.unpack(head)
    if magic != EVENTS_MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {EVENTS_MAGIC!r}", offset=0)
    if not math.isfinite(resolution) or resolution <= 0:
        raise TraceFormatError(f"resolution must be positive and finite, got {resolution}", offset=8)
    if not math.isfinite(origin):
        raise TraceFormatError("origin must be finite", offset=16)

    n_words = -(-length // WORD_BITS)
    payload = _read_payload(stream, n_words * 8, _EVENTS_HEADER.size, f"{length} slots need {n_words} words")
    words = np.frombuffer(payload, dtype="<u8")
    tail = length % WORD_BITS
    if tail and int(words[-1]) >> tail:
        raise TraceFormatError("padding bits past the last slot are set", offset=_EVENTS_HEADER.size + (n_words - 1) * 8)
    return EventSeries(resolution=resolution, words=words, length=length, origin=origin)


def read_events_file(path: PathLike) -> EventSeries:
    with open(path, "rb") as handle:
        series = read_events(handle)
    log_file_io("Read events", path, f"{series.length} slots, {series.event_count} events")
    return series


def write_events_file(series: EventSeries, path: PathLike) -> Path:
    path = Path(path)
    with open(path, "wb") as handle:
        write_events(series, handle)
    log_file_io("Wrote events", path, f"{series.length} slots, {series.event_count} events")
    return path


# ============================================================================
# ONSET DETECTION
# ============================================================================

def _comparator_codes(x: np.ndarray, high: float, low: float, mode: DigitizeMode) -> np.ndarray:
    """1 = at/above high, 0 = below low (re-armed), -1 = keep previous state."""
    if mode is DigitizeMode.SINGLE:
        return (x >= high).astype(np.int8)
    codes = np.full(x.shape[0], -1, dtype=np.int8)
    codes[x >= high] = 1
    codes[x < low] = 0
    return codes


def _exit_state(x: np.ndarray, high: float, low: float, mode: DigitizeMode) -> int:
    codes = _comparator_codes(x, high, low, mode)
    definite = np.flatnonzero(codes >= 0)
    return int(codes[definite[-1]]) if definite.size else -1


def _chunk_onsets(x: np.ndarray, high: float, low: float, mode: DigitizeMode, entry: int) -> np.ndarray:
    codes = _comparator_codes(x, high, low, mode)
    positions = np.where(codes >= 0, np.arange(x.shape[0]), -1)
    np.maximum.accumulate(positions, out=positions)
    state = np.where(positions >= 0, codes[np.maximum(positions, 0)], entry).astype(bool)
    previous = np.empty_like(state)
    previous[0] = bool(entry)
    previous[1:] = state[:-1]
    return state & ~previous


def digitize(
    trace: AnalogTrace,
    threshold_high: float = DEFAULT_THRESHOLD_HIGH,
    threshold_low: float = DEFAULT_THRESHOLD_LOW,
    mode: Union[DigitizeMode, str] = DigitizeMode.HYSTERESIS,
    chunk_slots: Optional[int] = None,
    threads: Optional[int] = None,
) -> EventSeries:
    """Mark each pulse onset with a 1-bit (Schmitt trigger by default).

    A 1 is emitted at the first sample >= threshold_high after the signal was
    below threshold_low (or at sample 0 if the trace starts high). In single
    mode only threshold_high is used and the trigger re-arms below it.
    Chunks are evaluated independently from their entry state, so the result
    does not depend on chunk size or thread count.
    """
    mode = DigitizeMode(mode)
    if not (math.isfinite(threshold_high) and math.isfinite(threshold_low)):
        raise ArgumentError("thresholds must be finite")
    if mode is DigitizeMode.HYSTERESIS and not threshold_low < threshold_high:
        raise ArgumentError(f"threshold_low ({threshold_low}) must be below threshold_high ({threshold_high})")
    n = len(trace)
    if n == 0:
        raise ArgumentError("cannot digitize an empty trace")

    chunk = chunk_slots or config.chunk_slots
    if chunk % WORD_BITS:
        raise ArgumentError("chunk_slots must be a multiple of 64")
    workers = resolve_threads(threads)
    samples = trace.samples
    bounds: List[Tuple[int, int]] = [(start, min(start + chunk, n)) for start in range(0, n, chunk)]

    def check_and_exit(span: Tuple[int, int]) -> int:
        x = samples[span[0]:span[1]]
        if not np.isfinite(x).all():
            raise DataError(f"non-finite sample in slots [{span[0]}, {span[1]})")
        return _exit_state(x, threshold_high, threshold_low, mode)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        exits = list(pool.map(check_and_exit, bounds))
        entries: List[int] = []
        state = 0
        for exit_state in exits:
            entries.append(state)
            if exit_state >= 0:
                state = exit_state
        packed = list(pool.map(
            lambda item: pack_bits(_chunk_onsets(samples[item[0][0]:item[0][1]], threshold_high, threshold_low, mode, item[1])),
            zip(bounds, entries),
        ))

    words = np.concatenate(packed) if packed else np.zeros(0, dtype="<u8")
    series = EventSeries(resolution=trace.sample_period, words=words, length=n, origin=0.0)
    logger.debug(f"digitize: {n} samples in {len(bounds)} chunks -> {series.event_count} onsets")
    return series


# ============================================================================
# DEAD TIME
# ============================================================================

def dead_time_slots(dead_time: float, resolution: float) -> int:
    """ceil(dead_time / resolution), rounded first so 22e-9 / 1e-9 gives 22."""
    if not math.isfinite(dead_time) or dead_time < 0:
        raise ArgumentError(f"dead time must be a non-negative finite number, got {dead_time}")
    return math.ceil(round(dead_time / resolution, 9))


def apply_dead_time(series: EventSeries, dead_time: float) -> EventSeries:
    """Non-paralyzable dead time: keep an event only if it starts a fresh window.

    Scanning left to right, a 1-bit survives when at least
    ceil(dead_time / resolution) slots separate it from the last survivor.
    """
    gap = dead_time_slots(dead_time, series.resolution)
    if gap <= 1:
        return series
    slots = series.event_slots()
    if slots.size < 2 or np.all(np.diff(slots) >= gap):
        return series

    ordered = slots.tolist()
    kept: List[int] = []
    i = 0
    while i < len(ordered):
        slot = ordered[i]
        kept.append(slot)
        i = bisect.bisect_left(ordered, slot + gap, i + 1)

    logger.debug(f"dead time {gap} slots: kept {len(kept)} of {len(ordered)} events")
    return EventSeries.from_slots(kept, series.length, series.resolution, series.origin)
