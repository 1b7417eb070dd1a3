class FastSumError(Exception):
    """Base class for library errors."""


class InvalidArgumentError(FastSumError, ValueError):
    pass


class RangeError(FastSumError, OverflowError):
    """An integer guard (factorial, binomial, Hermite order) was exceeded."""


class SingularTranslationError(FastSumError, ZeroDivisionError):
    """Expansion centres coincide, so the translation operator is undefined."""


class OutOfDomainError(FastSumError, ValueError):
    def __init__(self, index, point):
        self.index = index
        self.point = point
        super().__init__(f"particle {index} at {point!r} lies outside the domain")


class PlanConsistencyError(FastSumError, KeyError):
    pass


class ChipSpecError(FastSumError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"chip spec field {field!r}: {message}")
