class TrajError(Exception):
    """Base class for every error raised by trajxfer."""


class NonMonotonicTime(TrajError):
    pass


class OutOfRangeCoordinate(TrajError):
    pass


class EmptyTrajectory(TrajError):
    pass


class NegativeDelta(TrajError):
    pass


class DimMismatch(TrajError):
    pass


class MissingTarget(TrajError):
    pass


class NoAnchor(TrajError):
    """Every point of an instance has its location masked."""


class TooShort(TrajError):
    pass


class ZeroTarget(TrajError):
    pass


class ParseError(TrajError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InvalidSpec(TrajError):
    pass


class OutOfRange(TrajError):
    pass


class ProviderUnavailable(TrajError):
    pass


class IncompatibleCheckpoint(TrajError):
    pass


class DataEmpty(TrajError):
    pass


class DivergedLoss(TrajError):
    pass
