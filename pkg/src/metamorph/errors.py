"""Exception hierarchy shared across the package."""


class MetamorphError(Exception):
    """Base class for every error raised by this package."""


class ContractError(MetamorphError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(MetamorphError, FloatingPointError):
    """A computation produced NaN or Inf."""


class StructuralError(MetamorphError):
    """A network edit cannot be applied consistently (e.g. across a shortcut)."""


class AssemblyError(MetamorphError):
    """A network could not be assembled from the supplied weights."""


class TrainingError(MetamorphError):
    """Training diverged. ``checkpoint`` holds the last healthy state, if any."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class FormatError(MetamorphError):
    """An on-disk file does not match its declared binary format."""
