"""Exception hierarchy for mrverify.

Every error raised on purpose by the package derives from :class:`MrVerifyError`,
which keeps the human readable `message` around so the CLI can print it and exit
non-zero. Errors are grouped by the module that raises them.
"""

from __future__ import annotations

from typing import Any

__all__ = [
    "MrVerifyError",
    "ConfigError",
    "ImagingError",
    "RegionOutOfBounds",
    "InvalidAlpha",
    "InvalidFrame",
    "CorruptStream",
    "GeometryError",
    "DegenerateConfiguration",
    "SingularHomography",
    "PointAtInfinity",
    "MotionError",
    "InvalidDistance",
    "NotAwaiting",
    "SegmentationError",
    "EmptyReferenceMask",
    "UnknownFrame",
    "SegmenterFailure",
    "VerificationError",
    "DimensionMismatch",
    "EmptyUnion",
    "FrameTooSmall",
    "ZeroVariance",
    "ZeroVector",
    "DatasetError",
    "InstanceNotInImage",
    "UnshiftableInstance",
    "InsufficientSources",
    "ManifestCorrupt",
    "MissingFile",
    "ChecksumMismatch",
    "MetricsError",
    "LengthMismatch",
    "EmptyInput",
    "UndefinedRate",
    "TooFewPoints",
    "ProtocolError",
    "BadMagic",
    "UnsupportedVersion",
    "UnknownType",
    "TruncatedPayload",
    "MalformedPayload",
    "ConnectionLost",
    "StepTimeout",
    "ServerError",
]


class MrVerifyError(Exception):
    """Base class of all errors raised by mrverify."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"{type(self).__name__}: {self.message}"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.message!r})"


class ConfigError(MrVerifyError):
    """A configuration value is missing, malformed or out of range."""


class ImagingError(MrVerifyError): ...


class RegionOutOfBounds(ImagingError): ...


class InvalidAlpha(ImagingError): ...


class InvalidFrame(ImagingError): ...


class CorruptStream(ImagingError): ...


class GeometryError(MrVerifyError): ...


class DegenerateConfiguration(GeometryError): ...


class SingularHomography(GeometryError): ...


class PointAtInfinity(GeometryError): ...


class MotionError(MrVerifyError): ...


class InvalidDistance(MotionError): ...


class NotAwaiting(MotionError): ...


class SegmentationError(MrVerifyError): ...


class EmptyReferenceMask(SegmentationError): ...


class UnknownFrame(SegmentationError): ...


class SegmenterFailure(SegmentationError): ...


class VerificationError(MrVerifyError): ...


class DimensionMismatch(VerificationError): ...


class EmptyUnion(VerificationError): ...


class FrameTooSmall(VerificationError): ...


class ZeroVariance(VerificationError): ...


class ZeroVector(VerificationError): ...


class DatasetError(MrVerifyError): ...


class InstanceNotInImage(DatasetError): ...


class UnshiftableInstance(DatasetError): ...


class InsufficientSources(DatasetError): ...


class ManifestCorrupt(DatasetError): ...


class MissingFile(DatasetError):
    def __init__(self, message: str, *, sample: int | None = None, path: str = ""):
        super().__init__(message)
        self.sample = sample
        self.path = path


class ChecksumMismatch(DatasetError):
    def __init__(self, message: str, *, sample: int | None = None, path: str = ""):
        super().__init__(message)
        self.sample = sample
        self.path = path


class MetricsError(MrVerifyError): ...


class LengthMismatch(MetricsError): ...


class EmptyInput(MetricsError): ...


class UndefinedRate(MetricsError):
    """A rate's denominator is zero; `which` names the rate (ppv, tpr, fpr, acc)."""

    def __init__(self, which: str):
        super().__init__(f"{which} is undefined: its denominator is zero")
        self.which = which


class TooFewPoints(MetricsError): ...


class ProtocolError(MrVerifyError): ...


class BadMagic(ProtocolError): ...


class UnsupportedVersion(ProtocolError): ...


class UnknownType(ProtocolError): ...


class TruncatedPayload(ProtocolError): ...


class MalformedPayload(ProtocolError):
    """A payload has the right length but invalid content, or trailing bytes."""


class ConnectionLost(ProtocolError):
    """The peer went away; `partial_log` holds whatever was recorded before."""

    def __init__(self, message: str, partial_log: Any = None):
        super().__init__(message)
        self.partial_log = partial_log


class StepTimeout(ProtocolError):
    def __init__(self, message: str, partial_log: Any = None):
        super().__init__(message)
        self.partial_log = partial_log


class ServerError(ProtocolError):
    """The server answered with an Error message."""

    def __init__(self, code: int, message: str, partial_log: Any = None):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.partial_log = partial_log
