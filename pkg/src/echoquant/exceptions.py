"""Exception hierarchy shared across the package."""


class EchoQuantError(ValueError):
    """Base class for all domain errors raised by echoquant."""


class DegenerateAxisError(EchoQuantError):
    pass


class DiskCountMismatchError(EchoQuantError):
    pass


class IncompleteStudyError(EchoQuantError):
    pass


class InvalidLandmarksError(EchoQuantError):
    pass


class OutOfGridError(EchoQuantError):
    pass


class ConstantMapError(EchoQuantError):
    pass


class ShapeMismatchError(EchoQuantError):
    pass


class NonFiniteError(EchoQuantError):
    pass


class EmptyMaskError(EchoQuantError):
    pass


class ZeroVectorError(EchoQuantError):
    pass


class InvalidEpochError(EchoQuantError):
    pass


class InvalidParamsError(EchoQuantError):
    pass


class AugmentationError(EchoQuantError):
    """Raised when no transform draw keeps every landmark inside the frame."""


class DatasetError(EchoQuantError):
    """Missing, malformed or inconsistent files in a study bundle."""


class InconsistentSpacingError(DatasetError):
    pass


class NonFiniteLossError(RuntimeError):
    pass
