"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class StructuralError(ValueError):
    """Shapes, channel counts or model assignments do not line up."""


class FormatError(ValueError):
    """A bitstream or file does not follow the expected layout."""


class CorruptStreamError(FormatError):
    """A chunk failed its length or CRC check."""


class AlphabetOverflowError(ValueError):
    """Quantized symbols need a larger alphabet than the configured maximum."""


class UsageError(RuntimeError):
    """An API was called out of order."""


class TrainingDivergenceError(RuntimeError):
    """A loss component became non-finite during optimization."""
