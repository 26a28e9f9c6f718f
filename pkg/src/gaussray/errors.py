"""Exception types raised across the package.

Every error derives from :class:`GaussrayError` so callers (and the CLI exit
code mapping) can catch the whole family at once.
"""


class GaussrayError(Exception):
    """Base class for all package errors."""


class ConfigError(GaussrayError, ValueError):
    """A configuration file or value could not be interpreted."""


class DegenerateRay(GaussrayError, ValueError):
    pass


class InvalidView(GaussrayError, IndexError):
    pass


class InvalidCoord(GaussrayError, IndexError):
    pass


class StaleBvh(GaussrayError, RuntimeError):
    """The BVH was built for a cloud with a different number of primitives."""


class NegativeData(GaussrayError, ValueError):
    pass


class ShapeMismatch(GaussrayError, ValueError):
    pass


class StateMismatch(GaussrayError, ValueError):
    pass


class NonFiniteLoss(GaussrayError, FloatingPointError):
    """Training produced a NaN/Inf loss; carries a diagnostic message."""


class NoPeak(GaussrayError, ValueError):
    pass


class AmbiguousPeak(GaussrayError, ValueError):
    pass


class OutOfGrid(GaussrayError, IndexError):
    pass


class RoiOutOfGrid(OutOfGrid):
    pass


class ZeroBackground(GaussrayError, ZeroDivisionError):
    pass
