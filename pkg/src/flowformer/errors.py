"""Exception hierarchy shared by every module."""


class FlowformerError(Exception):
    """Base class for all library errors."""


class DimensionError(FlowformerError, ValueError):
    """Incompatible shapes, bad axes, or out-of-range lengths."""


class DomainError(FlowformerError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ResourceError(FlowformerError):
    """A requested computation exceeds an enforced size cap."""


class ContractError(FlowformerError, ValueError):
    """A caller violated an operation's precondition."""


class DataError(FlowformerError, ValueError):
    """Malformed or insufficient input data."""


class NumericalError(FlowformerError, ArithmeticError):
    """A kernel produced NaN or Inf from finite inputs."""


class UnsupportedOperationError(FlowformerError):
    """The requested operation is not defined for this configuration."""


class TrainingDiverged(FlowformerError):
    """Training hit a non-finite loss or gradient.

    ``checkpoint`` holds the last parameters that produced a finite loss.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
