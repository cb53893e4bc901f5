"""Local salient-point adversarial attacks on small point-cloud classifiers."""

__version__ = "0.1.0"


class SaliencyStrikeError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(SaliencyStrikeError, ValueError):
    pass


class ConfigError(SaliencyStrikeError, ValueError):
    pass


class DataError(SaliencyStrikeError, ValueError):
    pass


class CapacityError(SaliencyStrikeError, ValueError):
    pass


class NumericError(SaliencyStrikeError, ArithmeticError):
    pass


class ParseError(DataError):
    pass


class VersionError(SaliencyStrikeError, ValueError):
    pass
