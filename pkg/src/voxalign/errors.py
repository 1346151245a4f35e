"""Exception hierarchy shared across voxalign modules."""


class VoxalignError(Exception):
    """Base class for all errors raised by voxalign."""


class ValidationError(VoxalignError, ValueError):
    """Invalid user input (bad geometry, bad configuration, ...)."""


class ParseError(VoxalignError):
    """Malformed file content.  ``location`` names the line, byte or row."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} ({location})"
        super().__init__(message)


class IoError(VoxalignError, OSError):
    pass


class OutOfBoundsError(VoxalignError):
    """Interpolation support falls outside the sampled grid."""


class IndexOutOfRange(VoxalignError, IndexError):
    pass


class DegenerateLevel(VoxalignError):
    pass


class DegenerateInput(VoxalignError):
    pass


class DegeneratePointCloud(VoxalignError):
    pass


class TooFewSamples(VoxalignError):
    """Too few samples map inside the moving image (overlap collapsed)."""

    def __init__(self, used, count):
        self.used = used
        self.count = count
        super().__init__(f"only {used} of {count} samples inside the moving image")


class NonFiniteObjective(VoxalignError):
    pass


class LineSearchFailure(VoxalignError):
    pass


class GeometryMismatch(VoxalignError):
    pass


class StageError(VoxalignError):
    """Wraps an error raised inside a registration stage with its position."""

    def __init__(self, stage, level, cause):
        self.stage = stage
        self.level = level
        self.cause = cause
        super().__init__(f"[{stage} level {level}] {type(cause).__name__}: {cause}")
