"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class GSFuseError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class FormatError(GSFuseError):
    """Malformed or unsupported input file."""

    exit_code = 4


class ValidationError(GSFuseError):
    """Input parsed, but values violate a model invariant."""

    exit_code = 4


class ConfigError(GSFuseError):
    """Inconsistent or out-of-range configuration."""

    exit_code = 4


class DegenerateInputError(GSFuseError):
    """Input is valid but too degenerate for the requested operation."""

    exit_code = 5


class RegistrationFailure(GSFuseError):
    """Robust estimation could not find a supported transform."""

    exit_code = 6


class InsufficientCorrespondences(RegistrationFailure):
    """Fewer than three feature matches survived filtering."""
