"""Exception hierarchy shared by every kronadapt module."""


class KronAdaptError(Exception):
    """Base class for all library errors."""


class DimensionError(KronAdaptError, ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(KronAdaptError, ValueError):
    """An argument is outside its documented domain."""


class NumericalError(KronAdaptError, ArithmeticError):
    """A numerical procedure failed or produced non-finite values."""


class ConvergenceError(NumericalError):
    """An iterative method exhausted its iteration budget."""

    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class DegenerateSpectrumError(NumericalError):
    """A spectrum carries no energy, so energy fractions are undefined."""


class KronIOError(KronAdaptError, OSError):
    """Base class for file-format problems."""


class FormatError(KronIOError):
    """The file is not a kronadapt container (bad magic)."""


class VersionError(KronIOError):
    """The container version is not understood."""


class CorruptFileError(KronIOError):
    """Payload is truncated, oversized, or otherwise unreadable."""


class ConsistencyError(KronIOError):
    """Manifest and payload files disagree."""
