"""Exception taxonomy shared by the library and the CLI.

Each class maps to a stable CLI exit code, so library code should raise
the most specific type that applies.
"""


class ShapleySelectError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ValidationError(ShapleySelectError):
    """Invalid argument, configuration value, or violated precondition."""

    exit_code = 2


class FormatError(ShapleySelectError):
    """Malformed on-disk artifact (manifest, blob, CSV, config document)."""

    exit_code = 3


class CapacityError(ShapleySelectError):
    """Input too large for an intentionally guarded exact algorithm."""

    exit_code = 4


class NumericError(ShapleySelectError):
    """Non-finite values or numerical divergence during computation."""

    exit_code = 5
