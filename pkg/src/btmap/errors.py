"""Exception types shared across the package."""


class BtmapError(Exception):
    """Base class for errors raised by this package."""


class DataError(BtmapError):
    """Malformed or inconsistent input data (shapes, NaNs, duplicate points)."""


class NumericalError(BtmapError):
    """A linear-algebra or special-function evaluation failed beyond recovery."""
