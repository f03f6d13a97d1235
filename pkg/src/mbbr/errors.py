"""Exception types shared across the package."""


class MBBRError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(MBBRError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(MBBRError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class TapeStateError(MBBRError, RuntimeError):
    """The differentiation graph was used in an invalid order."""


class DataError(MBBRError, ValueError):
    """A scene record or dataset violates its invariants.

    ``line`` is the 1-based line number in the source file when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ShortageError(DataError):
    """Some predicate category has fewer triplets than requested."""

    def __init__(self, shortages: dict[int, int], k: int):
        self.shortages = dict(shortages)
        cats = ", ".join(f"{p} (has {n})" for p, n in sorted(shortages.items()))
        super().__init__(f"fewer than k={k} triplets for predicate categories: {cats}")


class ConfigError(MBBRError, ValueError):
    """A configuration value is invalid."""
