"""Exception hierarchy for photonstat."""

from typing import Optional


class PhotonstatError(Exception):
    """Base exception for photonstat errors."""
    pass


class ArgumentError(PhotonstatError, ValueError):
    """Invalid argument or configuration value."""
    pass


class TraceFormatError(PhotonstatError):
    """Malformed trace or event-series file."""

    def __init__(self, message: str, offset: Optional[int] = None, unit: str = "byte"):
        self.offset = offset
        self.unit = unit
        if offset is not None:
            message = f"{unit} {offset}: {message}"
        super().__init__(message)


class DataError(PhotonstatError):
    """Well-formed input carrying unusable data (NaN/Inf samples, mismatched arms)."""
    pass


class CalibrationError(PhotonstatError):
    """Bin-width calibration or statistics could not be computed."""
    pass
