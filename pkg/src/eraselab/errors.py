"""Error taxonomy shared by all modules.

The CLI maps these onto stable exit codes: config=1, io=2, numerical=3,
format=4 (plain OSError covers the io category).
"""


class ConfigError(ValueError):
    """Invalid configuration: bad value, unknown key, unresolvable name."""


class StructuralError(ValueError):
    """Shape/length mismatch or misuse of an API contract."""


class NumericalError(ArithmeticError):
    """NaN/Inf encountered where finite values are required."""


class FormatError(ValueError):
    """A persisted file does not match the expected byte format."""


class UnsupportedVersionError(FormatError):
    """Checkpoint written by a newer format revision than this build reads."""


class CorruptionError(FormatError):
    """Checkpoint payload is truncated or inconsistent with its manifest."""
