class QuantGuardError(Exception):
    """Base class for every error raised by the package."""


class ModelFormatError(QuantGuardError):
    pass


class ShapeMismatchError(QuantGuardError, ValueError):
    pass


class DatasetError(QuantGuardError):
    pass


class TrainingDivergedError(QuantGuardError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


class BitAllocationError(QuantGuardError, ValueError):
    pass


class VerificationError(QuantGuardError):
    """The verifier produced a result that does not survive concrete re-checking."""


class CegisAbortError(QuantGuardError):
    """The optimize/verify loop cannot continue and cannot classify the outcome."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class PropertyError(QuantGuardError, ValueError):
    """An equivalence property cannot be built from the given anchor, radius or mask."""
