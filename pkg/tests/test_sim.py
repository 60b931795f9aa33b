"""Tests for the detection-chain simulator."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import ArgumentError
from src.events import digitize
from src.models import EventSeries, SimConfig, SourceKind
from src.sim import (
    BLOCK_SLOTS,
    block_rng,
    coherent_photon_slots,
    expected_detected_rate,
    gen_coherent,
    gen_spdc,
    oam_heralding_factor,
    parse_sim_config,
    render_trace,
    saturation_warnings,
    simulate_iteration,
    spdc_photon_slots,
)
from src.stats import bin_counts, herald, histogram, mandel_q, moments


def _coherent(**overrides) -> SimConfig:
    values = {"kind": "coherent", "duration_s": 1e-3, "photon_rate_hz": 1e7, "dead_time_s": 0.0, "rng_seed": 1}
    return SimConfig(**{**values, **overrides})


def _spdc(**overrides) -> SimConfig:
    values = {
        "kind": "spdc_pair",
        "duration_s": 1e-3,
        "mode_time_s": 4e-9,
        "mean_pairs_per_mode": 0.02,
        "dead_time_s": 0.0,
        "rng_seed": 3,
    }
    return SimConfig(**{**values, **overrides})


class TestSimConfigFile:
    """Test the key = value configuration format."""

    def test_parse(self, spdc_config_text):
        """Test comments, blank lines and type conversion."""
        cfg = parse_sim_config(spdc_config_text)
        assert cfg.kind is SourceKind.SPDC_PAIR
        assert cfg.mean_pairs_per_mode == 0.008
        assert cfg.dead_time_s == 22e-9
        assert cfg.rng_seed == 7

    def test_unknown_key_names_line(self):
        """Test unknown keys are reported with their line."""
        with pytest.raises(ArgumentError) as excinfo:
            parse_sim_config("kind = coherent\nduration_s = 1e-3\nlaser_power = 1\n")
        assert "line 3" in str(excinfo.value)
        assert "laser_power" in str(excinfo.value)

    def test_duplicate_key(self):
        """Test keys may appear only once."""
        with pytest.raises(ArgumentError) as excinfo:
            parse_sim_config("kind = coherent\nkind = spdc_pair\nduration_s = 1\n")
        assert "line 2" in str(excinfo.value)

    def test_missing_separator(self):
        """Test lines without '='."""
        with pytest.raises(ArgumentError):
            parse_sim_config("kind coherent\n")

    def test_invalid_value(self):
        """Test validation errors become argument errors."""
        with pytest.raises(ArgumentError) as excinfo:
            parse_sim_config("kind = coherent\nduration_s = 1e-3\nefficiency_signal = 2\n")
        assert "efficiency_signal" in str(excinfo.value)


class TestRates:
    """Test rate models and warnings."""

    @pytest.mark.parametrize("overrides,expected", [
        ({"pump_oam_order": 0}, 1.0),
        ({"pump_oam_order": 1}, 0.5),
        ({"pump_oam_order": 3}, 0.25),
        ({"pump_oam_order": 2, "oam_heralding_model": "geometric", "oam_heralding_base": 0.5}, 0.25),
        ({"pump_oam_order": 2, "oam_heralding_model": "constant"}, 1.0),
        ({"pump_oam_order": 2, "oam_heralding_scale": 0.3}, 0.3),
    ])
    def test_oam_heralding_factor(self, overrides, expected):
        """Test the idler heralding factor per model."""
        assert oam_heralding_factor(_spdc(**overrides)) == pytest.approx(expected)

    def test_expected_detected_rate(self):
        """Test non-paralyzable throughput."""
        assert expected_detected_rate(1e7, 22e-9) == pytest.approx(1e7 / 1.22)
        assert expected_detected_rate(1e7, 0.0) == 1e7

    def test_no_warnings_at_low_rate(self):
        """Test a moderate source is quiet."""
        assert saturation_warnings(_coherent(photon_rate_hz=1e6, dead_time_s=22e-9)) == []

    def test_saturation_warning(self):
        """Test more than one expected event per slot."""
        warnings = saturation_warnings(_coherent(photon_rate_hz=2e9))
        assert any("saturates" in w for w in warnings)

    def test_dead_time_warning(self):
        """Test a dead-time dominated arm."""
        warnings = saturation_warnings(_coherent(photon_rate_hz=5e7, dead_time_s=22e-9))
        assert any("dead-time load" in w for w in warnings)


class TestDeterminism:
    """Test seeded, thread-independent generation."""

    def test_block_rng_streams(self):
        """Test identical cells repeat and different cells differ."""
        a = block_rng(5, 0, 0, 0).random(4)
        assert np.array_equal(a, block_rng(5, 0, 0, 0).random(4))
        assert not np.array_equal(a, block_rng(5, 1, 0, 0).random(4))
        assert not np.array_equal(a, block_rng(5, 0, 1, 0).random(4))
        assert not np.array_equal(a, block_rng(6, 0, 0, 0).random(4))

    def test_same_seed_same_series(self):
        """Test repeated runs are identical."""
        cfg = _coherent()
        assert gen_coherent(cfg, 2) == gen_coherent(cfg, 2)
        assert gen_coherent(cfg, 2) != gen_coherent(cfg, 3)

    def test_thread_count_independent(self):
        """Test multi-block runs do not depend on the worker count."""
        cfg = _coherent(duration_s=2.5 * BLOCK_SLOTS * 1e-9, photon_rate_hz=1e5, dark_rate_hz=1e4)
        assert gen_coherent(cfg, threads=1) == gen_coherent(cfg, threads=3)
        spdc = _spdc(duration_s=2.5 * BLOCK_SLOTS * 1e-9, mean_pairs_per_mode=0.001, dark_rate_hz=1e4)
        assert gen_spdc(spdc, threads=1) == gen_spdc(spdc, threads=4)


class TestCoherentSource:
    """Test the coherent source."""

    def test_zero_rate(self):
        """Test a dark source yields no events."""
        assert gen_coherent(_coherent(photon_rate_hz=0.0)).event_count == 0

    def test_event_count_matches_rate(self):
        """Test the count is near rate x duration."""
        cfg = _coherent(photon_rate_hz=1e7, duration_s=1e-3)
        count = gen_coherent(cfg).event_count
        expected = 1e4 * (1 - math.exp(-0.01)) / 0.01
        assert abs(count - expected) <= 3 * math.sqrt(1e4)

    def test_efficiency_thins_to_subset(self):
        """Test lower efficiency keeps a subset of the same photons."""
        full = coherent_photon_slots(_coherent(efficiency_signal=1.0))
        half = coherent_photon_slots(_coherent(efficiency_signal=0.5))
        assert np.all(np.isin(half, full))
        assert 0.45 * full.size < half.size < 0.55 * full.size

    def test_dead_time_spacing(self):
        """Test detected events respect the dead time."""
        series = gen_coherent(_coherent(photon_rate_hz=2e7, dead_time_s=22e-9))
        assert np.all(np.diff(series.event_slots()) >= 22)

    def test_poissonian_statistics(self):
        """Test Q is near zero without dead time."""
        series = gen_coherent(_coherent(photon_rate_hz=5e6, duration_s=0.01))
        h = histogram(bin_counts(series, 200), 200)
        assert abs(mandel_q(*moments(h))) < 0.03

    def test_wrong_kind(self):
        """Test coherent generation rejects pair configs."""
        with pytest.raises(ArgumentError):
            coherent_photon_slots(_spdc())


class TestSpdcSource:
    """Test the pair source."""

    def test_zero_occupancy(self):
        """Test both arms are empty without pairs or dark counts."""
        signal, idler = gen_spdc(_spdc(mean_pairs_per_mode=0.0))
        assert signal.event_count == 0
        assert idler.event_count == 0

    def test_pairs_share_modes(self):
        """Test with unit efficiency both arms hold the same photons per mode."""
        cfg = _spdc(mean_pairs_per_mode=0.3)
        signal, idler = spdc_photon_slots(cfg)
        n_modes = cfg.slot_count // cfg.mode_slots
        per_signal = np.bincount(signal // cfg.mode_slots, minlength=n_modes)
        per_idler = np.bincount(idler // cfg.mode_slots, minlength=n_modes)
        assert np.array_equal(per_signal, per_idler)
        assert signal.size > 0

    def test_perfect_heralding(self):
        """Test every signal event is heralded when the window spans a mode."""
        cfg = _spdc(mean_pairs_per_mode=0.05)
        signal, idler = gen_spdc(cfg)
        assert herald(signal, idler, window_slots=cfg.mode_slots - 1).event_count == signal.event_count

    def test_oam_order_reduces_idler_rate(self):
        """Test a lower heralding factor keeps fewer idler photons."""
        base = spdc_photon_slots(_spdc(mean_pairs_per_mode=0.1))[1]
        reduced = spdc_photon_slots(_spdc(mean_pairs_per_mode=0.1, pump_oam_order=3))[1]
        assert np.all(np.isin(reduced, base))
        assert 0.2 * base.size < reduced.size < 0.3 * base.size

    def test_thermal_single_arm(self):
        """Test a single arm binned over four modes has Q near the occupancy."""
        cfg = _spdc(mean_pairs_per_mode=0.25, mode_time_s=1e-7, duration_s=0.1)
        signal, _ = gen_spdc(cfg)
        h = histogram(bin_counts(signal, 4 * cfg.mode_slots), 4 * cfg.mode_slots)
        q = mandel_q(*moments(h))
        assert 0.225 <= q <= 0.275

    def test_mode_shorter_than_slot(self):
        """Test modes must span at least one slot."""
        with pytest.raises(ArgumentError):
            spdc_photon_slots(_spdc(mode_time_s=0.5e-9))

    def test_simulate_iteration_arms(self):
        """Test arm names per source kind."""
        assert set(simulate_iteration(_spdc())) == {"signal", "idler"}
        assert set(simulate_iteration(_coherent(photon_rate_hz=1e5))) == {""}


class TestRenderTrace:
    """Test synthetic TTL traces."""

    def test_pulse_shape(self):
        """Test pulse width, amplitude and baseline."""
        cfg = _coherent(trace_pulse_width_s=3e-9, trace_amplitude_v=5.0, trace_baseline_v=0.1)
        series = EventSeries.from_slots([2, 10], length=16, resolution=1e-9)
        trace = render_trace(series, cfg, channel_label="signal")
        assert trace.samples.dtype == np.float32
        assert np.flatnonzero(trace.samples == np.float32(5.0)).tolist() == [2, 3, 4, 10, 11, 12]
        assert trace.samples[0] == np.float32(0.1)
        assert trace.channel_label == "signal"

    def test_digitize_round_trip(self):
        """Test digitizing a rendered trace recovers the series."""
        cfg = _coherent(photon_rate_hz=2e7, dead_time_s=22e-9, duration_s=2e-4)
        series = gen_coherent(cfg)
        assert digitize(render_trace(series, cfg)) == series


class TestConfigValidation:
    """Test simulation parameters at construction."""

    def test_invalid_kind(self):
        """Test unknown source kinds."""
        with pytest.raises(ValidationError):
            SimConfig(kind="laser", duration_s=1e-3)
