"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`DfgpError`.
The CLI maps the two broad families to exit codes: :class:`DataError` -> 2,
:class:`NumericalError` -> 3.
"""


class DfgpError(Exception):
    pass


class DataError(DfgpError):
    """Bad or insufficient input data."""


class NumericalError(DfgpError):
    """A numerical procedure failed (factorization, divergence)."""


class FormatError(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class EmptyTrainingSet(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class TooManySamples(DataError):
    pass


class MissingExtractor(DataError):
    pass


class BatchTooSmall(DataError, ValueError):
    pass


class StateError(DfgpError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class SingularMatrix(NumericalError):
    pass


class NumericalDivergence(NumericalError):
    pass
