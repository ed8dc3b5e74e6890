"""Exception hierarchy.

``InputError`` subclasses map to CLI exit code 1, ``NumericalError`` to 2.
"""


class LioGvmError(Exception):
    pass


class InputError(LioGvmError):
    pass


class NumericalError(LioGvmError):
    pass


class EmptyImuBuffer(InputError):
    pass


class NonMonotonicTimestamps(InputError):
    pass


class ImuCoverageError(InputError):
    pass


class TimestampOutOfCache(InputError):
    pass


class TooFewPoints(InputError):
    pass


class VoxelSizeMismatch(InputError):
    pass


class NonPositiveDeterminant(NumericalError):
    pass


class SingularSum(NumericalError):
    pass


class NumericalFailure(NumericalError):
    pass


class InvalidSpec(InputError):
    pass


class InsufficientOverlap(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TruncatedRecord(InputError):
    def __init__(self, path, offset):
        super().__init__(f"{path}: truncated record at byte offset {offset}")
        self.offset = offset


class BadMagic(InputError):
    pass


class ConfigError(InputError):
    def __init__(self, key, message):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key
