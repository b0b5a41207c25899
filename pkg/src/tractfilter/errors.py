"""Exception hierarchy shared by all modules."""


class TractFilterError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgumentError(TractFilterError, ValueError):
    pass


class InvalidCouplingError(TractFilterError, ValueError):
    """Orders violate the triangle inequality or do not match a spec."""


class UnsupportedOrderError(TractFilterError, ValueError):
    pass


class AsymmetryError(TractFilterError, ValueError):
    """Coefficients do not describe a real-valued angular function."""


class InsufficientDirectionsError(TractFilterError, ValueError):
    pass


class GridTooSmallError(TractFilterError, ValueError):
    pass


class RankDeficiencyError(TractFilterError, ArithmeticError):
    pass


class CorruptModelError(TractFilterError, ValueError):
    pass


class IncompatibleModelError(TractFilterError, ValueError):
    pass


class FormatError(TractFilterError, ValueError):
    """A binary file does not match its declared layout."""


class UndefinedICCError(TractFilterError, ArithmeticError):
    pass
