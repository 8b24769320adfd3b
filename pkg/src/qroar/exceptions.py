"""Exception hierarchy.

Every error raised by the library derives from :class:`QRoarError`. The
``exit_code`` attribute is what the command line maps each class to.
"""


class QRoarError(Exception):
    exit_code = 1


class ConfigError(QRoarError, ValueError):
    """Invalid parameters or configuration."""

    exit_code = 2


class DataError(QRoarError, ValueError):
    """Input data that cannot be processed (shapes, sample sizes, references)."""

    exit_code = 3


class InvalidDimension(ConfigError):
    pass


class InvalidBase(ConfigError):
    pass


class InvalidWindow(ConfigError):
    pass


class InvalidStretch(ConfigError):
    pass


class InvalidRamp(ConfigError):
    pass


class InvalidScale(ConfigError):
    pass


class InvalidInflation(ConfigError):
    pass


class InvalidSpec(ConfigError):
    pass


class UnknownScheme(ConfigError):
    pass


class ShapeError(DataError):
    pass


class SampleSizeError(DataError):
    pass


class DegenerateQuantile(DataError):
    pass


class ReferenceMismatch(DataError):
    pass
