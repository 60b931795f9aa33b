"""Pydantic models for photonstat: waveforms, event series, histograms and reports."""

import math
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing_extensions import Self

from .errors import ArgumentError

WORD_BITS = 64
# bytes -> number of set bits
_POPCOUNT_TABLE = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


class TraceFormat(str, Enum):
    """On-disk analog trace formats."""
    CSV = "csv"
    RAWF32 = "rawf32"


class DigitizeMode(str, Enum):
    """Comparator model used to find pulse onsets."""
    HYSTERESIS = "hysteresis"
    SINGLE = "single"


class WindowMode(str, Enum):
    """Coincidence window sidedness."""
    SYMMETRIC = "symmetric"
    FORWARD = "forward"


class SourceKind(str, Enum):
    """Simulated source."""
    COHERENT = "coherent"
    SPDC_PAIR = "spdc_pair"


class OamHeraldingModel(str, Enum):
    """Functional form of the idler heralding factor p_l."""
    INVERSE = "inverse"
    GEOMETRIC = "geometric"
    CONSTANT = "constant"


# ============================================================================
# SIGNAL TYPES
# ============================================================================

class AnalogTrace(BaseModel):
    """Uniformly sampled voltage waveform from one detector channel."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    sample_period: float = Field(1e-9, description="Seconds per sample")
    samples: np.ndarray = Field(..., description="Voltage values (V), 1-D")
    channel_label: str = Field("", description="Free text channel name")

    @field_validator("sample_period")
    @classmethod
    def validate_sample_period(cls, v: float) -> float:
        if not math.isfinite(v) or v <= 0:
            raise ValueError("sample_period must be a positive finite number")
        return v

    @field_validator("samples", mode="before")
    @classmethod
    def validate_samples(cls, v: Any) -> np.ndarray:
        arr = np.asarray(v)
        if arr.dtype.kind not in "fiu":
            raise ValueError("samples must be numeric")
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        view = arr.view()
        view.flags.writeable = False
        return view

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnalogTrace):
            return NotImplemented
        return (
            self.sample_period == other.sample_period
            and self.channel_label == other.channel_label
            and np.array_equal(self.samples, other.samples)
        )

    @property
    def duration(self) -> float:
        return len(self) * self.sample_period


class EventSeries(BaseModel):
    """Bit-per-slot detection record, packed 64 slots per little-endian word.

    Bit k of the series is bit (k % 64) of word k // 64; padding bits past
    `length` are always zero.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    resolution: float = Field(..., description="Seconds per slot")
    words: np.ndarray = Field(..., description="Packed slots, dtype <u8")
    length: int = Field(..., ge=0, description="Number of slots")
    origin: float = Field(0.0, description="Start time offset in seconds")

    @field_validator("resolution")
    @classmethod
    def validate_resolution(cls, v: float) -> float:
        if not math.isfinite(v) or v <= 0:
            raise ValueError("resolution must be a positive finite number")
        return v

    @field_validator("words", mode="before")
    @classmethod
    def validate_words(cls, v: Any) -> np.ndarray:
        arr = np.ascontiguousarray(v, dtype="<u8")
        if arr.ndim != 1:
            raise ValueError("words must be one-dimensional")
        view = arr.view()
        view.flags.writeable = False
        return view

    @model_validator(mode="after")
    def validate_packing(self) -> Self:
        expected = -(-self.length // WORD_BITS)
        if self.words.shape[0] != expected:
            raise ValueError(f"{self.length} slots need {expected} words, got {self.words.shape[0]}")
        tail = self.length % WORD_BITS
        if tail and int(self.words[-1]) >> tail:
            raise ValueError("padding bits past the last slot must be zero")
        return self

    # ------------------------------------------------------------------
    # Constructors
    # ------------------------------------------------------------------

    @classmethod
    def empty(cls, length: int, resolution: float, origin: float = 0.0) -> "EventSeries":
        words = np.zeros(-(-length // WORD_BITS), dtype="<u8")
        return cls(resolution=resolution, words=words, length=length, origin=origin)

    @classmethod
    def from_bits(cls, bits: Any, resolution: float, origin: float = 0.0) -> "EventSeries":
        """Pack a boolean slot array."""
        flags = np.asarray(bits, dtype=bool)
        return cls(resolution=resolution, words=pack_bits(flags), length=int(flags.shape[0]), origin=origin)

    @classmethod
    def from_slots(cls, slots: Any, length: int, resolution: float, origin: float = 0.0) -> "EventSeries":
        """Build a series with 1-bits at the given slot indices (duplicates collapse)."""
        idx = np.asarray(slots, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= length):
            raise ArgumentError(f"slot indices must lie in [0, {length})")
        words = np.zeros(-(-length // WORD_BITS), dtype="<u8")
        if idx.size:
            shifts = (idx & (WORD_BITS - 1)).astype(np.uint64)
            np.bitwise_or.at(words, idx >> 6, np.left_shift(np.uint64(1), shifts))
        return cls(resolution=resolution, words=words, length=length, origin=origin)

    # ------------------------------------------------------------------
    # Views
    # ------------------------------------------------------------------

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventSeries):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.length == other.length
            and self.origin == other.origin
            and np.array_equal(self.words, other.words)
        )

    @property
    def event_count(self) -> int:
        """popcount over all slots."""
        return int(_POPCOUNT_TABLE[self.words.view(np.uint8)].sum(dtype=np.int64))

    @property
    def duration(self) -> float:
        return self.length * self.resolution

    def to_bits(self) -> np.ndarray:
        return np.unpackbits(self.words.view(np.uint8), count=self.length, bitorder="little").astype(bool)

    def event_slots(self, chunk_words: int = 1 << 16) -> np.ndarray:
        """Sorted slot indices of all 1-bits."""
        raw = self.words.view(np.uint8)
        parts: List[np.ndarray] = []
        for start in range(0, self.words.shape[0], chunk_words):
            chunk = raw[start * 8:(start + chunk_words) * 8]
            bits = np.unpackbits(chunk, bitorder="little")
            parts.append(np.flatnonzero(bits).astype(np.int64) + start * WORD_BITS)
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(parts)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack booleans into little-endian uint64 words, LSB = earliest slot."""
    packed = np.packbits(np.asarray(bits, dtype=bool), bitorder="little")
    pad = (-packed.shape[0]) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros(pad, dtype=np.uint8)])
    return packed.view("<u8")


# ============================================================================
# STATISTICS TYPES
# ============================================================================

class CountHistogram(BaseModel):
    """Photon-number distribution: how many bins held exactly n events."""
    model_config = ConfigDict(frozen=True)

    bin_width_slots: int = Field(..., ge=1, description="Bin width in slots")
    counts_per_n: Dict[int, int] = Field(..., description="n -> number of bins with n events")
    total_bins: int = Field(..., ge=1, description="Number of bins")

    @model_validator(mode="after")
    def validate_totals(self) -> Self:
        if any(n < 0 or c < 0 for n, c in self.counts_per_n.items()):
            raise ValueError("counts_per_n keys and values must be non-negative")
        if sum(self.counts_per_n.values()) != self.total_bins:
            raise ValueError("counts_per_n must sum to total_bins")
        return self

    @property
    def n_max(self) -> int:
        return max(self.counts_per_n) if self.counts_per_n else 0

    def probabilities(self) -> Dict[int, float]:
        return {n: c / self.total_bins for n, c in sorted(self.counts_per_n.items())}


class IterationResult(BaseModel):
    """Statistics of one recorded (or simulated) time series."""
    index: int = Field(..., ge=0)
    source: str = Field("", description="File or stream the series came from")
    event_count: int = Field(..., ge=0)
    bin_width_slots: int = Field(..., ge=1)
    histogram: CountHistogram
    mean: float
    variance: float
    q: float


class QReport(BaseModel):
    """Mandel Q summary across iterations."""
    mean: float = Field(..., ge=0, description="Pooled <n> over iterations")
    variance: float = Field(..., ge=0, description="Pooled <(dn)^2> over iterations")
    q: float = Field(..., description="(variance - mean) / mean")
    per_iteration_q: List[float]
    q_mean: float
    q_std: float
    iterations: List[IterationResult] = Field(default_factory=list)
    label: str = ""
    rng_algorithm: Optional[str] = None

    @property
    def classical_violation_sigmas(self) -> Optional[float]:
        """Sample standard deviations by which q_mean lies below Q = 0."""
        if not self.q_std > 0:
            return None
        return -self.q_mean / self.q_std


# ============================================================================
# SIMULATION AND RUN METADATA
# ============================================================================

class SimConfig(BaseModel):
    """Parameters of a simulated source and detector chain."""
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, frozen=True)

    kind: SourceKind
    duration_s: float = Field(..., gt=0)
    resolution_s: float = Field(1e-9, gt=0)
    photon_rate_hz: float = Field(0.0, ge=0, description="Coherent source photon rate")
    pair_rate_hz: float = Field(0.0, ge=0, description="SPDC pair generation rate")
    mean_pairs_per_mode: Optional[float] = Field(None, ge=0, description="Thermal occupancy per mode")
    mode_time_s: float = Field(10e-9, gt=0)
    efficiency_signal: float = Field(1.0, ge=0, le=1)
    efficiency_idler: float = Field(1.0, ge=0, le=1)
    dark_rate_hz: float = Field(0.0, ge=0)
    dead_time_s: float = Field(22e-9, ge=0)
    pump_oam_order: int = Field(0, ge=0)
    oam_heralding_model: OamHeraldingModel = OamHeraldingModel.INVERSE
    oam_heralding_base: float = Field(0.5, gt=0, le=1)
    oam_heralding_scale: Optional[float] = Field(None, gt=0, le=1)
    rng_seed: int = Field(0, ge=0, lt=2**64)
    trace_pulse_width_s: float = Field(10e-9, gt=0)
    trace_amplitude_v: float = 3.3
    trace_baseline_v: float = 0.0

    @model_validator(mode="after")
    def validate_consistency(self) -> Self:
        if self.pump_oam_order == 0 and self.oam_heralding_scale not in (None, 1.0):
            raise ValueError("oam_heralding_scale must be 1 for pump_oam_order 0")
        if round(self.duration_s / self.resolution_s) < 1:
            raise ValueError("duration_s must cover at least one slot")
        return self

    @property
    def slot_count(self) -> int:
        return int(round(self.duration_s / self.resolution_s))

    @property
    def mode_slots(self) -> int:
        return int(round(self.mode_time_s / self.resolution_s))

    @property
    def pairs_per_mode(self) -> float:
        """Thermal occupancy, derived from pair_rate_hz when not given."""
        if self.mean_pairs_per_mode is not None:
            return self.mean_pairs_per_mode
        return self.pair_rate_hz * self.mode_time_s


class RunManifest(BaseModel):
    """Record of one CLI run: inputs, outputs and how they were produced."""
    command_line: List[str]
    format_version: str
    tool_version: str
    inputs: Dict[str, str] = Field(default_factory=dict, description="path -> sha256")
    sim_config: Optional[Dict[str, Any]] = None
    outputs: List[str] = Field(default_factory=list)
    wall_clock_s: float = 0.0
    rng_algorithm: Optional[str] = None
    warnings: List[str] = Field(default_factory=list)
    created_at: str = ""
