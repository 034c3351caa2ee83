"""Exception types raised across the package."""


class CalibrationError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(CalibrationError, ValueError):
    pass


class DuplicateTimestamp(CalibrationError, ValueError):
    pass


class TooFewKnots(CalibrationError, ValueError):
    pass


class OutOfBounds(CalibrationError, ValueError):
    pass


class PixelOutOfBounds(CalibrationError, ValueError):
    pass


class NonUnitDirection(CalibrationError, ValueError):
    pass


class EmptyBatch(CalibrationError, ValueError):
    pass


class PatchTooSmall(CalibrationError, ValueError):
    pass


class NonFiniteLoss(CalibrationError, FloatingPointError):
    """Raised when the total loss diverges; carries diagnostics for the epoch."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UnknownSensor(CalibrationError, KeyError):
    pass


class ShapeMismatch(CalibrationError, ValueError):
    pass


class SensorSetMismatch(CalibrationError, ValueError):
    pass


class ParseError(CalibrationError, ValueError):
    """Malformed input file. ``path`` and ``line`` locate the problem."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class MissingFile(CalibrationError, FileNotFoundError):
    pass
