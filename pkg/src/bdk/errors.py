"""Exception families shared across modules.

Each family maps to one CLI exit code (see ``bdk.cli``).
"""


class BdkError(Exception):
    exit_code = 1


class IOFailure(BdkError):
    exit_code = 2


class ValidationError(BdkError, ValueError):
    exit_code = 3


class NumericError(BdkError, ArithmeticError):
    exit_code = 4


class NotFoundError(BdkError, LookupError):
    exit_code = 5


class DimensionError(ValidationError):
    pass


class CheckpointError(IOFailure):
    pass


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedFileError(ChecksumError):
    """File ended before the declared payload; reported as a checksum failure too."""
