"""Width-metamorphic residual networks generated by implicit neural representations."""

from .errors import (AssemblyError, ContractError, DimensionError, FormatError, MetamorphError, NumericError,
                     StructuralError, TrainingError)

__version__ = "0.1.0"

__all__ = [
    "AssemblyError", "ContractError", "DimensionError", "FormatError", "MetamorphError", "NumericError",
    "StructuralError", "TrainingError", "__version__",
]
