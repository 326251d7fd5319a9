"""Exception types shared across the package.

The CLI maps ConfigError (and subclasses) to exit code 2 and
NumericalError to exit code 3.
"""


class ConfigError(Exception):
    """Invalid configuration, flag value, or input file."""


class FormatError(ConfigError):
    """Container file carries the wrong or a missing format tag."""


class ParseError(ConfigError):
    """Malformed row in an input file; message names the location."""


class DataIntegrityError(ConfigError):
    """Input files disagree with each other (e.g. unlabeled patient)."""


class NumericalError(Exception):
    """Non-finite value encountered during training or evaluation."""


class ShapeError(ValueError):
    """Operands with incompatible shapes passed to a graph primitive."""
