"""Exception hierarchy shared by every pmanet module."""


class PMAError(Exception):
    """Base class for all pmanet errors."""


class ShapeMismatch(PMAError, ValueError):
    pass


class NonFiniteValue(PMAError, FloatingPointError):
    pass


class NotScalarLoss(PMAError, ValueError):
    pass


class EmptyCorpus(PMAError, ValueError):
    pass


class VocabTooSmall(PMAError, ValueError):
    pass


class EmptyInput(PMAError, ValueError):
    pass


class UnknownId(PMAError, ValueError):
    pass


class IdOutOfRange(PMAError, IndexError):
    pass


class EmptySpan(PMAError, ValueError):
    pass


class InvalidLevel(PMAError, ValueError):
    pass


class LabelOutOfRange(PMAError, ValueError):
    pass


class DataEmpty(PMAError, ValueError):
    pass


class DivergenceDetected(PMAError, FloatingPointError):
    pass


class MissingColumn(PMAError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UnknownLabel(PMAError, ValueError):
    pass


class EmptyFile(PMAError, ValueError):
    pass


class FractionOverflow(PMAError, ValueError):
    pass


class NoHost(PMAError, ValueError):
    pass


class Unsplittable(PMAError, ValueError):
    pass


class NoBoundaries(PMAError, ValueError):
    pass


class InsufficientSource(PMAError, ValueError):
    pass


class BadCheckpoint(PMAError, ValueError):
    pass
