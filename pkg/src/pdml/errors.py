"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PdmlError(Exception):
    exit_code = 1


class ConfigError(PdmlError, ValueError):
    """Bad argument, shape mismatch or invalid configuration."""

    exit_code = 2


class SplitError(ConfigError):
    pass


class IngestError(PdmlError):
    """Malformed or unreadable input file."""

    exit_code = 3


class CheckpointError(IngestError):
    pass


class RenderError(ConfigError):
    pass


class NumericError(PdmlError, ArithmeticError):
    """Non-finite loss, gradient or update."""

    exit_code = 4
