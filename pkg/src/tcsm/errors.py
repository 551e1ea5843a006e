"""Exception types shared across the package.

Every error raised on purpose by this package is one of these four, so the
command line layer can map them onto stable exit codes.
"""


class ShapeError(ValueError):
    """An array argument has the wrong rank, extent, or dtype-incompatible shape."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where only finite values are allowed."""


class CorruptFileError(IOError):
    """A checkpoint or dataset file failed structural validation while reading."""


class ConfigError(ValueError):
    """A configuration key, value, or command line argument is invalid."""
