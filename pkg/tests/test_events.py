"""Tests for trace files, event files, digitization and dead time."""

import io
import struct

import numpy as np
import pytest

from src.errors import ArgumentError, DataError, TraceFormatError
from src.events import (
    EVENTS_MAGIC,
    TRACE_CSV_MAGIC,
    apply_dead_time,
    dead_time_slots,
    digitize,
    parse_trace,
    read_events,
    read_events_file,
    read_trace,
    write_events,
    write_trace,
    write_trace_file,
)
from src.models import AnalogTrace, EventSeries, TraceFormat


def _encode(trace: AnalogTrace, fmt: str) -> bytes:
    sink = io.BytesIO()
    write_trace(trace, sink, fmt)
    return sink.getvalue()


class TestTraceCsv:
    """Test the CSV trace format."""

    def test_round_trip_is_exact(self, rng):
        """Test CSV keeps every sample bit for bit."""
        trace = AnalogTrace(sample_period=2.5e-10, samples=rng.normal(size=200), channel_label="APD signal")
        assert parse_trace(_encode(trace, "csv"), "csv") == trace

    def test_parses_hand_written_file(self):
        """Test a minimal file written by hand."""
        data = f"{TRACE_CSV_MAGIC}\nsample_period_s=1e-9\nchannel=idler\n0\n3.3\n0.1\n".encode()
        trace = parse_trace(data, TraceFormat.CSV)
        assert trace.channel_label == "idler"
        assert trace.samples.tolist() == [0.0, 3.3, 0.1]

    def test_bad_magic(self):
        """Test the first line must carry the magic."""
        with pytest.raises(TraceFormatError) as excinfo:
            parse_trace(b"time,volts\nsample_period_s=1e-9\nchannel=a\n0\n", "csv")
        assert excinfo.value.offset == 1
        assert excinfo.value.unit == "line"

    def test_bad_sample_reports_line(self):
        """Test an unparsable sample names its line."""
        data = f"{TRACE_CSV_MAGIC}\nsample_period_s=1e-9\nchannel=a\n0\n1\nvolts\n".encode()
        with pytest.raises(TraceFormatError) as excinfo:
            parse_trace(data, "csv")
        assert excinfo.value.offset == 6

    def test_empty_sample_section(self):
        """Test a header without samples."""
        for data in (f"{TRACE_CSV_MAGIC}\nsample_period_s=1e-9\nchannel=a\n", f"{TRACE_CSV_MAGIC}\nsample_period_s=1e-9\nchannel=a"):
            with pytest.raises(TraceFormatError) as excinfo:
                parse_trace(data.encode(), "csv")
            assert excinfo.value.offset == 4

    @pytest.mark.parametrize("period", ["0", "-1e-9", "abc", "inf"])
    def test_invalid_period(self, period):
        """Test invalid sample periods are rejected on line 2."""
        data = f"{TRACE_CSV_MAGIC}\nsample_period_s={period}\nchannel=a\n0\n".encode()
        with pytest.raises(TraceFormatError) as excinfo:
            parse_trace(data, "csv")
        assert excinfo.value.offset == 2

    def test_digit_separator_rejected(self):
        """Test tokens that float() accepts but the sample reader does not."""
        data = f"{TRACE_CSV_MAGIC}\nsample_period_s=1e-9\nchannel=a\n0.0\n1_000\n".encode()
        with pytest.raises(TraceFormatError) as excinfo:
            parse_trace(data, "csv")
        assert excinfo.value.offset == 5
        assert excinfo.value.unit == "line"

    def test_non_finite_sample(self):
        """Test NaN samples are a data error."""
        data = f"{TRACE_CSV_MAGIC}\nsample_period_s=1e-9\nchannel=a\n0\nnan\n".encode()
        with pytest.raises(DataError):
            parse_trace(data, "csv")

    def test_multiline_label_rejected(self):
        """Test labels must fit on the channel line."""
        trace = AnalogTrace(samples=[0.0], channel_label="a\nb")
        with pytest.raises(ArgumentError):
            _encode(trace, "csv")


class TestTraceRaw:
    """Test the RAWF32 trace format."""

    def test_round_trip(self, rng):
        """Test float32 samples round-trip exactly."""
        samples = rng.normal(size=100).astype(np.float32)
        trace = AnalogTrace(sample_period=1e-9, samples=samples)
        decoded = parse_trace(_encode(trace, "rawf32"), "rawf32")
        assert decoded == trace
        assert decoded.channel_label == ""

    def test_header_layout(self):
        """Test the fixed 32-byte header."""
        data = _encode(AnalogTrace(sample_period=1e-9, samples=[1.0, 2.0]), "rawf32")
        assert len(data) == 32 + 8
        assert data[:8] == b"PHSTRACE"
        assert struct.unpack_from("<H", data, 8)[0] == 1
        assert struct.unpack_from("<dQ", data, 16) == (1e-9, 2)

    def test_bad_magic(self):
        """Test a wrong magic is reported at byte 0."""
        data = bytearray(_encode(AnalogTrace(samples=[1.0]), "rawf32"))
        data[0:8] = b"NOTTRACE"
        with pytest.raises(TraceFormatError) as excinfo:
            parse_trace(bytes(data), "rawf32")
        assert excinfo.value.offset == 0

    def test_unsupported_version(self):
        """Test unknown versions are rejected."""
        data = bytearray(_encode(AnalogTrace(samples=[1.0]), "rawf32"))
        data[8:10] = struct.pack("<H", 2)
        with pytest.raises(TraceFormatError) as excinfo:
            parse_trace(bytes(data), "rawf32")
        assert excinfo.value.offset == 8

    def test_truncated_samples(self):
        """Test a payload shorter than the declared count."""
        data = _encode(AnalogTrace(samples=[1.0, 2.0, 3.0]), "rawf32")[:-2]
        with pytest.raises(TraceFormatError) as excinfo:
            parse_trace(data, "rawf32")
        assert excinfo.value.offset == 32 + 10

    def test_trailing_data(self):
        """Test bytes after the declared samples."""
        data = _encode(AnalogTrace(samples=[1.0]), "rawf32") + b"\x00"
        with pytest.raises(TraceFormatError) as excinfo:
            parse_trace(data, "rawf32")
        assert excinfo.value.offset == 36

    @pytest.mark.parametrize("count", [2**40, 2**62, 2**64 - 1])
    def test_oversized_count_is_format_error(self, count):
        """Test a huge declared count fails on the size check, before any allocation."""
        data = b"PHSTRACE" + struct.pack("<HHI", 1, 0, 0) + struct.pack("<dQ", 1e-9, count) + b"\x00" * 8
        with pytest.raises(TraceFormatError) as excinfo:
            parse_trace(data, "rawf32")
        assert excinfo.value.offset == 32 + 8

    def test_oversized_count_in_file(self, tmp_path):
        """Test the size check also applies to files on disk."""
        path = tmp_path / "huge.f32"
        path.write_bytes(b"PHSTRACE" + struct.pack("<HHI", 1, 0, 0) + struct.pack("<dQ", 1e-9, 2**40) + b"\x00" * 16)
        with pytest.raises(TraceFormatError) as excinfo:
            read_trace(path)
        assert excinfo.value.offset == 32 + 16

    def test_zero_samples(self):
        """Test an empty sample section."""
        data = b"PHSTRACE" + struct.pack("<HHI", 1, 0, 0) + struct.pack("<dQ", 1e-9, 0)
        with pytest.raises(TraceFormatError):
            parse_trace(data, "rawf32")

    def test_non_finite_sample(self):
        """Test Inf samples are a data error."""
        data = b"PHSTRACE" + struct.pack("<HHI", 1, 0, 0) + struct.pack("<dQ", 1e-9, 2)
        data += np.array([0.0, np.inf], dtype="<f4").tobytes()
        with pytest.raises(DataError):
            parse_trace(data, "rawf32")


class TestTraceFiles:
    """Test reading traces from disk."""

    def test_format_is_sniffed(self, tmp_path, pulse_trace):
        """Test read_trace picks the format from the file."""
        raw = write_trace_file(pulse_trace, tmp_path / "t.f32", TraceFormat.RAWF32)
        csv = write_trace_file(pulse_trace, tmp_path / "t.csv", TraceFormat.CSV)
        assert np.array_equal(read_trace(raw).samples, pulse_trace.samples.astype(np.float32))
        assert read_trace(csv) == pulse_trace


class TestEventFiles:
    """Test the PHSEVNT1 event-series format."""

    def _encode(self, series: EventSeries) -> bytes:
        sink = io.BytesIO()
        write_events(series, sink)
        return sink.getvalue()

    def test_round_trip(self, random_series):
        """Test words, length, resolution and origin survive."""
        series = random_series(length=1000, p=0.2)
        series = EventSeries(resolution=series.resolution, words=series.words, length=series.length, origin=1.5e-6)
        assert read_events(self._encode(series)) == series

    def test_layout(self):
        """Test header fields and word payload."""
        data = self._encode(EventSeries.from_slots([0, 65], length=70, resolution=1e-9))
        assert data[:8] == EVENTS_MAGIC
        assert struct.unpack_from("<ddQ", data, 8) == (1e-9, 0.0, 70)
        assert np.frombuffer(data[32:], dtype="<u8").tolist() == [1, 2]

    def test_bad_magic(self):
        """Test a wrong magic is rejected."""
        data = b"PHSEVNT2" + self._encode(EventSeries.empty(10, 1e-9))[8:]
        with pytest.raises(TraceFormatError):
            read_events(data)

    def test_padding_bits_set(self):
        """Test set bits past the last slot are a format error."""
        data = EVENTS_MAGIC + struct.pack("<ddQ", 1e-9, 0.0, 10) + np.array([1 << 12], dtype="<u8").tobytes()
        with pytest.raises(TraceFormatError):
            read_events(data)

    def test_truncated_words(self):
        """Test a payload shorter than the length implies."""
        data = self._encode(EventSeries.empty(200, 1e-9))[:-8]
        with pytest.raises(TraceFormatError):
            read_events(data)

    def test_oversized_length_is_format_error(self, tmp_path):
        """Test a huge declared length fails on the size check."""
        path = tmp_path / "huge.ev"
        path.write_bytes(EVENTS_MAGIC + struct.pack("<ddQ", 1e-9, 0.0, 2**63) + b"\x00" * 8)
        with pytest.raises(TraceFormatError) as excinfo:
            read_events_file(path)
        assert excinfo.value.offset == 32 + 8

    def test_unseekable_stream(self):
        """Test truncation is still caught on a stream that cannot seek."""

        class Pipe(io.RawIOBase):
            def __init__(self, data: bytes):
                self._inner = io.BytesIO(data)

            def readable(self) -> bool:
                return True

            def readinto(self, buffer) -> int:
                chunk = self._inner.read(len(buffer))
                buffer[:len(chunk)] = chunk
                return len(chunk)

        data = self._encode(EventSeries.from_slots([3], 200, 1e-9))
        assert read_events(io.BufferedReader(Pipe(data))).event_slots().tolist() == [3]
        with pytest.raises(TraceFormatError):
            read_events(io.BufferedReader(Pipe(data[:-8])))


class TestDigitize:
    """Test onset detection."""

    def test_clean_pulses(self, pulse_trace):
        """Test one onset per pulse, at its first high sample."""
        series = digitize(pulse_trace)
        assert series.event_slots().tolist() == [2, 10, 20]
        assert series.length == 30
        assert series.resolution == 1e-9

    def test_hysteresis_ignores_ringing(self):
        """Test the trigger re-arms only below the low threshold."""
        trace = AnalogTrace(samples=[0.0, 2.0, 1.0, 2.0, 0.4, 2.0])
        assert digitize(trace).event_slots().tolist() == [1, 5]

    def test_single_threshold_mode(self):
        """Test single mode re-arms below threshold_high."""
        trace = AnalogTrace(samples=[0.0, 2.0, 1.0, 2.0, 0.4, 2.0])
        assert digitize(trace, mode="single").event_slots().tolist() == [1, 3, 5]

    def test_trace_starting_high(self):
        """Test a trace that starts above threshold has an onset at slot 0."""
        trace = AnalogTrace(samples=[3.3, 3.3, 0.0, 3.3])
        assert digitize(trace).event_slots().tolist() == [0, 3]

    def test_sample_equal_to_threshold(self):
        """Test >= comparison at the high threshold."""
        trace = AnalogTrace(samples=[0.0, 1.5, 0.0])
        assert digitize(trace).event_slots().tolist() == [1]

    def test_chunking_and_threads_do_not_change_result(self, rng):
        """Test chunked evaluation equals a single pass."""
        samples = rng.uniform(-0.5, 3.5, size=64 * 50 + 17)
        trace = AnalogTrace(samples=samples)
        reference = digitize(trace, chunk_slots=64 * 64, threads=1)
        for chunk, threads in ((64, 1), (64, 4), (128, 3), (640, 2)):
            assert digitize(trace, chunk_slots=chunk, threads=threads) == reference

    def test_pulse_spanning_chunk_boundary(self):
        """Test a pulse crossing a chunk boundary yields one onset."""
        samples = np.zeros(256)
        samples[60:70] = 3.3
        series = digitize(AnalogTrace(samples=samples), chunk_slots=64, threads=2)
        assert series.event_slots().tolist() == [60]

    def test_invalid_thresholds(self, pulse_trace):
        """Test low must be below high in hysteresis mode."""
        with pytest.raises(ArgumentError):
            digitize(pulse_trace, threshold_high=0.5, threshold_low=1.5)
        with pytest.raises(ArgumentError):
            digitize(pulse_trace, threshold_high=float("nan"))

    def test_non_finite_sample(self):
        """Test NaN samples are a data error."""
        with pytest.raises(DataError):
            digitize(AnalogTrace(samples=[0.0, float("nan")]))

    def test_empty_trace(self):
        """Test an empty trace cannot be digitized."""
        with pytest.raises(ArgumentError):
            digitize(AnalogTrace(samples=np.zeros(0)))

    def test_chunk_must_be_word_multiple(self, pulse_trace):
        """Test chunk sizes not divisible by 64."""
        with pytest.raises(ArgumentError):
            digitize(pulse_trace, chunk_slots=100)


class TestDeadTime:
    """Test non-paralyzable dead time."""

    @pytest.mark.parametrize("dead_time,resolution,expected", [
        (22e-9, 1e-9, 22),
        (0.0, 1e-9, 0),
        (2.5e-9, 1e-9, 3),
        (1e-9, 1e-9, 1),
        (30e-9, 10e-9, 3),
    ])
    def test_dead_time_slots(self, dead_time, resolution, expected):
        """Test ceil(dead_time / resolution)."""
        assert dead_time_slots(dead_time, resolution) == expected

    def test_keeps_first_event_of_each_window(self):
        """Test events inside the window of a kept event are dropped."""
        series = EventSeries.from_slots([0, 5, 21, 22, 30, 44, 45], length=100, resolution=1e-9)
        assert apply_dead_time(series, 22e-9).event_slots().tolist() == [0, 22, 44]

    def test_dropped_events_do_not_extend_window(self):
        """Test non-paralyzable behaviour: a dropped event starts nothing."""
        series = EventSeries.from_slots([0, 3, 6, 9], length=20, resolution=1e-9)
        assert apply_dead_time(series, 5e-9).event_slots().tolist() == [0, 6]

    def test_idempotent_and_subset(self, random_series):
        """Test applying twice changes nothing and only removes events."""
        series = random_series(length=5000, p=0.1)
        once = apply_dead_time(series, 22e-9)
        assert apply_dead_time(once, 22e-9) == once
        assert np.all(np.isin(once.event_slots(), series.event_slots()))
        assert np.all(np.diff(once.event_slots()) >= 22)

    @pytest.mark.parametrize("dead_time", [0.0, 1e-9, 0.5e-9])
    def test_short_dead_time_is_identity(self, random_series, dead_time):
        """Test a window of at most one slot removes nothing."""
        series = random_series(length=500, p=0.5)
        assert apply_dead_time(series, dead_time) == series

    def test_negative_dead_time(self, random_series):
        """Test negative dead time is an argument error."""
        with pytest.raises(ArgumentError):
            apply_dead_time(random_series(), -1e-9)
