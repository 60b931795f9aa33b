"""Test configuration and fixtures."""

import os

import numpy as np
import pytest

# Set test environment variables
os.environ.setdefault("PHOTONSTAT_THREADS", "2")
os.environ.setdefault("PHOTONSTAT_CHUNK_SLOTS", "4096")
os.environ["DEBUG"] = "true"

from src.models import AnalogTrace, EventSeries  # noqa: E402


@pytest.fixture
def rng():
    """Seeded generator for test data (independent of the simulator streams)."""
    return np.random.default_rng(20240607)


@pytest.fixture
def random_series(rng):
    """Factory for random event series with a given length and occupancy."""
    def make(length: int = 1000, p: float = 0.1, resolution: float = 1e-9) -> EventSeries:
        return EventSeries.from_bits(rng.random(length) < p, resolution=resolution)
    return make


@pytest.fixture
def pulse_trace():
    """Three clean TTL pulses on a 1 ns grid (onsets at 2, 10 and 20)."""
    samples = np.zeros(30)
    samples[2:6] = 3.3
    samples[10:12] = 3.3
    samples[20:25] = 3.3
    return AnalogTrace(sample_period=1e-9, samples=samples, channel_label="ch1")


@pytest.fixture
def coherent_config_text():
    """Small coherent-source configuration."""
    return """
# coherent laser, attenuated
kind = coherent
duration_s = 2e-4
photon_rate_hz = 5e6
dead_time_s = 0
rng_seed = 11
"""


@pytest.fixture
def spdc_config_text():
    """Small heralded-source configuration."""
    return """
kind = spdc_pair
duration_s = 1e-3
mode_time_s = 2e-9
mean_pairs_per_mode = 0.008
dead_time_s = 22e-9
rng_seed = 7
"""


@pytest.fixture
def coherent_config_file(tmp_path, coherent_config_text):
    path = tmp_path / "coherent.cfg"
    path.write_text(coherent_config_text)
    return path


@pytest.fixture
def spdc_config_file(tmp_path, spdc_config_text):
    path = tmp_path / "spdc.cfg"
    path.write_text(spdc_config_text)
    return path
