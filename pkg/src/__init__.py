"""photonstat: photon-number statistics, heralded coincidences and Mandel Q."""

__version__ = "1.0.0"

# Bumped whenever an on-disk format (traces, event files, Q reports, manifests) changes.
FORMAT_VERSION = "1"
