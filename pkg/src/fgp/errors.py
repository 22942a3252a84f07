"""Exception hierarchy shared across the package."""


class FgpError(ValueError):
    """Base class for all domain errors raised by this package."""


class InputError(FgpError):
    """Invalid user-supplied data (bad vectors, malformed files, bad configs)."""


class NumericalError(FgpError):
    """A computation left its guaranteed domain (e.g. log of a non-positive value)."""
