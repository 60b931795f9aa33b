"""Monte-Carlo detection-chain simulator.

Generates detection event series for a coherent source and for the two arms
of a thermal-marginal SPDC pair source, including detector efficiency, dark
counts, slot collapse (non-number-resolving detectors) and dead time.

Random numbers: block b of iteration i, stream s draws from
PCG64(SeedSequence(entropy=rng_seed, spawn_key=(i, s, b))). Blocks have a
fixed size, so the output is bit-identical for any thread count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .errors import ArgumentError
from .events import apply_dead_time
from .models import AnalogTrace, EventSeries, OamHeraldingModel, SimConfig, SourceKind
from .utils import PathLike, resolve_threads

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy-PCG64/SeedSequence(entropy=rng_seed, spawn_key=(iteration, stream, block))"
BLOCK_SLOTS = 1 << 22

STREAM_PHOTONS = 0
STREAM_DARK_SIGNAL = 1
STREAM_DARK_IDLER = 2


def block_rng(seed: int, iteration: int, stream: int, block: int) -> np.random.Generator:
    """Independent generator for one (iteration, stream, block) cell."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(iteration, stream, block))
    return np.random.Generator(np.random.PCG64(sequence))


# ============================================================================
# CONFIGURATION
# ============================================================================

def load_sim_config(path: PathLike) -> SimConfig:
    """Parse a flat `key = value` file (`#` starts a comment)."""
    return parse_sim_config(Path(path).read_text(encoding="utf-8"))


def parse_sim_config(text: str) -> SimConfig:
    known = set(SimConfig.model_fields)
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ArgumentError(f"line {lineno}: expected 'key = value'")
        if key not in known:
            raise ArgumentError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ArgumentError(f"line {lineno}: duplicate key '{key}'")
        values[key] = value.strip()
    try:
        return SimConfig(**values)
    except ValidationError as e:
        details = [f"'{'.'.join(str(x) for x in err['loc'])}': {err['msg']}" for err in e.errors()]
        raise ArgumentError("invalid simulation config: " + "; ".join(details))


def oam_heralding_factor(cfg: SimConfig) -> float:
    """Idler heralding factor p_l for the configured pump OAM order (p_0 = 1)."""
    order = cfg.pump_oam_order
    if order == 0:
        return 1.0
    if cfg.oam_heralding_scale is not None:
        return cfg.oam_heralding_scale
    if cfg.oam_heralding_model is OamHeraldingModel.INVERSE:
        return 1.0 / (order + 1)
    if cfg.oam_heralding_model is OamHeraldingModel.GEOMETRIC:
        return cfg.oam_heralding_base ** order
    return 1.0


def expected_detected_rate(rate_hz: float, dead_time_s: float) -> float:
    """Non-paralyzable throughput rate / (1 + rate * dead_time)."""
    return rate_hz / (1.0 + rate_hz * dead_time_s)


def arm_photon_rates(cfg: SimConfig) -> Dict[str, float]:
    """Expected detected photon rate (before dead time) per arm, in Hz."""
    if cfg.kind is SourceKind.COHERENT:
        return {"signal": cfg.photon_rate_hz * cfg.efficiency_signal + cfg.dark_rate_hz}
    pair_rate = cfg.pairs_per_mode / cfg.mode_time_s
    return {
        "signal": pair_rate * cfg.efficiency_signal + cfg.dark_rate_hz,
        "idler": pair_rate * cfg.efficiency_idler * oam_heralding_factor(cfg) + cfg.dark_rate_hz,
    }


def saturation_warnings(cfg: SimConfig) -> List[str]:
    """Conditions under which the detector model saturates or dead time dominates."""
    warnings: List[str] = []
    for arm, rate in arm_photon_rates(cfg).items():
        per_slot = rate * cfg.resolution_s
        if per_slot > 1:
            warnings.append(f"{arm}: {per_slot:.3g} expected events per slot > 1, detector saturates")
        load = rate * cfg.dead_time_s
        if load > 0.5:
            detected = expected_detected_rate(rate, cfg.dead_time_s)
            warnings.append(f"{arm}: dead-time load {load:.3g}, only {detected:.4g} of {rate:.4g} Hz registered")
    return warnings


def _log_warnings(cfg: SimConfig) -> None:
    for message in saturation_warnings(cfg):
        logger.warning(message)


# ============================================================================
# PHOTON SLOTS (before slot collapse and dead time)
# ============================================================================

def _dark_slots(cfg: SimConfig, iteration: int, stream: int, block: int, start: int, stop: int) -> np.ndarray:
    if cfg.dark_rate_hz <= 0:
        return np.zeros(0, dtype=np.int64)
    rng = block_rng(cfg.rng_seed, iteration, stream, block)
    n = rng.poisson(cfg.dark_rate_hz * (stop - start) * cfg.resolution_s)
    return rng.integers(start, stop, size=n, dtype=np.int64)


def coherent_photon_slots(cfg: SimConfig, iteration: int = 0, threads: Optional[int] = None) -> np.ndarray:
    """Detected photon and dark-count slots of a coherent source, duplicates kept."""
    if cfg.kind is not SourceKind.COHERENT:
        raise ArgumentError(f"expected a coherent config, got kind={cfg.kind.value}")
    length = cfg.slot_count

    def block(b: int) -> np.ndarray:
        start = b * BLOCK_SLOTS
        stop = min(start + BLOCK_SLOTS, length)
        rng = block_rng(cfg.rng_seed, iteration, STREAM_PHOTONS, b)
        n = rng.poisson(cfg.photon_rate_hz * (stop - start) * cfg.resolution_s)
        slots = rng.integers(start, stop, size=n, dtype=np.int64)
        # drawn for every photon so that a lower efficiency keeps a subset
        detected = rng.random(n) < cfg.efficiency_signal
        dark = _dark_slots(cfg, iteration, STREAM_DARK_SIGNAL, b, start, stop)
        return np.concatenate([slots[detected], dark])

    n_blocks = -(-length // BLOCK_SLOTS)
    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        parts = list(pool.map(block, range(n_blocks)))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def spdc_photon_slots(cfg: SimConfig, iteration: int = 0, threads: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Detected (signal, idler) photon slots of an SPDC pair source, duplicates kept.

    Pairs per mode follow a Bose-Einstein distribution with mean
    `pairs_per_mode`; each photon of a pair is detected independently and
    placed uniformly (and independently) inside its mode.
    """
    if cfg.kind is not SourceKind.SPDC_PAIR:
        raise ArgumentError(f"expected an spdc_pair config, got kind={cfg.kind.value}")
    if cfg.mode_time_s < cfg.resolution_s or cfg.mode_slots < 1:
        raise ArgumentError(f"mode_time_s ({cfg.mode_time_s}) must not be shorter than resolution_s ({cfg.resolution_s})")

    length = cfg.slot_count
    mode_slots = cfg.mode_slots
    n_modes = -(-length // mode_slots)
    modes_per_block = max(1, BLOCK_SLOTS // mode_slots)
    mean_pairs = cfg.pairs_per_mode
    idler_efficiency = cfg.efficiency_idler * oam_heralding_factor(cfg)

    def block(b: int) -> Tuple[np.ndarray, np.ndarray]:
        first = b * modes_per_block
        last = min(first + modes_per_block, n_modes)
        rng = block_rng(cfg.rng_seed, iteration, STREAM_PHOTONS, b)
        if mean_pairs > 0:
            pairs = rng.geometric(1.0 / (1.0 + mean_pairs), size=last - first) - 1
        else:
            pairs = np.zeros(last - first, dtype=np.int64)
        pair_modes = np.repeat(np.arange(first, last, dtype=np.int64), pairs)
        n = pair_modes.shape[0]
        signal_hit = rng.random(n) < cfg.efficiency_signal
        idler_hit = rng.random(n) < idler_efficiency
        signal = pair_modes * mode_slots + rng.integers(0, mode_slots, size=n, dtype=np.int64)
        idler = pair_modes * mode_slots + rng.integers(0, mode_slots, size=n, dtype=np.int64)

        start, stop = first * mode_slots, min(last * mode_slots, length)
        signal = np.concatenate([signal[signal_hit], _dark_slots(cfg, iteration, STREAM_DARK_SIGNAL, b, start, stop)])
        idler = np.concatenate([idler[idler_hit], _dark_slots(cfg, iteration, STREAM_DARK_IDLER, b, start, stop)])
        return signal[signal < length], idler[idler < length]

    n_blocks = -(-n_modes // modes_per_block)
    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        parts = list(pool.map(block, range(n_blocks)))
    if not parts:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# ============================================================================
# EVENT SERIES
# ============================================================================

def _detect(slots: np.ndarray, cfg: SimConfig) -> EventSeries:
    # several photons in one slot register as a single 1-bit
    series = EventSeries.from_slots(slots, cfg.slot_count, cfg.resolution_s)
    return apply_dead_time(series, cfg.dead_time_s)


def gen_coherent(cfg: SimConfig, iteration: int = 0, threads: Optional[int] = None) -> EventSeries:
    """Poisson photon stream thinned by efficiency, plus dark counts, then dead time."""
    _log_warnings(cfg)
    series = _detect(coherent_photon_slots(cfg, iteration, threads), cfg)
    logger.debug(f"coherent iteration {iteration}: {series.event_count} events in {series.length} slots")
    return series


def gen_spdc(cfg: SimConfig, iteration: int = 0, threads: Optional[int] = None) -> Tuple[EventSeries, EventSeries]:
    """Signal and idler detection series of a thermal-marginal pair source."""
    _log_warnings(cfg)
    signal_slots, idler_slots = spdc_photon_slots(cfg, iteration, threads)
    signal, idler = _detect(signal_slots, cfg), _detect(idler_slots, cfg)
    logger.debug(f"spdc iteration {iteration}: signal {signal.event_count}, idler {idler.event_count} events")
    return signal, idler


def simulate_iteration(cfg: SimConfig, iteration: int = 0, threads: Optional[int] = None) -> Dict[str, EventSeries]:
    """Arm name -> series; coherent runs have the single arm ''."""
    if cfg.kind is SourceKind.COHERENT:
        return {"": gen_coherent(cfg, iteration, threads)}
    signal, idler = gen_spdc(cfg, iteration, threads)
    return {"signal": signal, "idler": idler}


def render_trace(series: EventSeries, cfg: SimConfig, channel_label: str = "") -> AnalogTrace:
    """Synthetic TTL waveform: one rectangular pulse starting at every event slot."""
    width = max(1, int(round(cfg.trace_pulse_width_s / series.resolution)))
    samples = np.full(series.length, cfg.trace_baseline_v, dtype=np.float32)
    slots = series.event_slots()
    for offset in range(width):
        idx = slots + offset
        samples[idx[idx < series.length]] = cfg.trace_amplitude_v
    return AnalogTrace(sample_period=series.resolution, samples=samples, channel_label=channel_label)
