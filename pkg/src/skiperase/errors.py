"""Exception taxonomy, mapped onto CLI exit codes by skiperase.cli."""


class SkipEraseError(Exception):
    """Base class for package errors."""


class ConfigError(SkipEraseError):
    """Bad configuration value or unknown option. CLI exit code 2."""


class InputError(SkipEraseError):
    """Malformed runtime input (shape/length mismatch, empty set). CLI exit code 2."""


class PreconditionError(SkipEraseError):
    """Missing file, checksum mismatch, or failed admissibility gate. CLI exit code 3."""


class NumericalError(SkipEraseError):
    """Non-finite loss or other numerical failure. CLI exit code 4."""
