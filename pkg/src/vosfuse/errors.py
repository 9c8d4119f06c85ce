"""Exception types shared across the package.

Everything raised on bad input derives from :class:`VosError` so the CLI can
map it to exit status 1 with a one-line message.
"""

from __future__ import annotations


class VosError(Exception):
    """Base class for validation and data errors."""


class MissingFile(VosError, FileNotFoundError):
    pass


class NotIndexedPng(VosError):
    pass


class CorruptImage(VosError):
    pass


class LabelOverflow(VosError):
    pass


class IoFailure(VosError, OSError):
    pass


class InconsistentCoverage(VosError):
    pass


class DimensionMismatch(VosError):
    pass


class FrameCountMismatch(VosError):
    pass


class ConfidenceOutOfRange(VosError):
    pass


class NegativeConfidence(VosError):
    pass


class LengthMismatch(VosError):
    pass


class OutOfRange(VosError):
    pass


class ScoreOutOfRange(VosError):
    pass


class EmptyInput(VosError):
    pass


class UnknownModel(VosError):
    pass


class ConfigInvalid(VosError):
    pass


class InvalidFrameNames(VosError):
    pass
