"""Exception hierarchy.

Everything raised for bad user input derives from :class:`InputError` so the
command line can map it to exit code 1.
"""


class InputError(Exception):
    """Base class for errors caused by invalid inputs or files."""


class FormatError(InputError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class BadHeader(FormatError):
    pass


class Truncated(FormatError):
    pass


class NonFinite(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class IoFailure(InputError, OSError):
    pass


class DimensionMismatch(InputError, ValueError):
    pass


class GeometryMismatch(InputError, ValueError):
    pass


class InvalidPatchSize(InputError, ValueError):
    pass


class BinCountMismatch(InputError, ValueError):
    pass


class PoolTooSmall(InputError, ValueError):
    pass


class DegenerateK(InputError, ValueError):
    pass


class EmptyTraining(InputError, ValueError):
    pass


class InsufficientHistory(InputError, ValueError):
    pass


class NoAbnormalFrames(InputError, ValueError):
    pass


class NoNormalFrames(InputError, ValueError):
    pass


class MissingMask(InputError, ValueError):
    pass


class DegenerateScores(InputError, ValueError):
    pass


class InvalidSpec(InputError, ValueError):
    pass


class ConfigError(InputError, ValueError):
    pass


class InvariantViolation(AssertionError):
    """An internal consistency check failed (exit code 2)."""
