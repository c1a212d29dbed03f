"""Exception types shared across the package."""


class CTNNError(Exception):
    """Base class for all library errors."""


# complexes and neighborhoods
class ComplexError(CTNNError, ValueError):
    pass


class RankMonotonicityViolation(ComplexError):
    pass


class DuplicateCell(ComplexError):
    pass


class SingletonRankNonzero(ComplexError):
    pass


class UnknownCell(ComplexError, KeyError):
    pass


class RankMismatch(ComplexError):
    pass


class NeighborOutsideZ(ComplexError):
    pass


# numerics
class ShapeMismatch(CTNNError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class NotScalarLoss(CTNNError, ValueError):
    pass


class DetachedTensor(CTNNError, RuntimeError):
    pass


class NonFiniteValue(CTNNError, FloatingPointError):
    pass


class NonPositiveWeight(CTNNError, ValueError):
    pass


class SymmetrizationViolation(CTNNError, ValueError):
    pass


class NonConvergence(CTNNError, RuntimeWarning):
    pass


class EmptyDataset(CTNNError, ValueError):
    pass


class ConfigError(CTNNError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
