"""Context-aware rotary position encoding in a self-contained numpy
transformer, with sinusoidal, learnable, and classic rotary baselines,
plus training, evaluation, benchmarking, and gradient-check harnesses."""

from .errors import (CaropeError, ConfigError, ContractError, DimensionError,
                     GradCheckError, IngestionError, NumericError,
                     PositionRangeError)

__version__ = "0.1.0"

__all__ = [
    "CaropeError", "ConfigError", "ContractError", "DimensionError",
    "GradCheckError", "IngestionError", "NumericError", "PositionRangeError",
    "__version__",
]
