"""Exception hierarchy shared across the package."""


class DGFieldError(Exception):
    """Base class for all errors raised by dgfield."""


class InvalidCameraError(DGFieldError, ValueError):
    pass


class OutOfFrustumError(DGFieldError, ValueError):
    pass


class InputError(DGFieldError, ValueError):
    pass


class ConstructionError(DGFieldError, ValueError):
    pass


class OutOfBoundsError(DGFieldError, ValueError):
    pass


class UnsupportedError(DGFieldError, ValueError):
    pass


class MaterializationError(DGFieldError, MemoryError):
    pass


class ContractError(DGFieldError, ValueError):
    pass


class NumericalError(DGFieldError, FloatingPointError):
    """A non-finite value appeared; ``block`` names the offending parameter block."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class DivergenceError(DGFieldError, FloatingPointError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class LoadError(DGFieldError, ValueError):
    pass


class CheckpointError(DGFieldError, ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
