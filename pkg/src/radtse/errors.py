"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Everything else is a plain bug and crashes loudly.
"""


class RadtseError(Exception):
    pass


class ConfigError(RadtseError):
    """Invalid configuration: bad keys, out-of-range values, bad layer setup."""


class ShapeError(RadtseError):
    """Array/tensor extents are incompatible with the requested operation."""


class StateError(RadtseError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class ValidationError(RadtseError):
    """Input values violate an operation's contract (non-binary labels, ...)."""


class DataError(RadtseError):
    """Missing or malformed on-disk inputs."""


class NumericalError(RadtseError):
    """Non-finite values or divergence during optimization."""
