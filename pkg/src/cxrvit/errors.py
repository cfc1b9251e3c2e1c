"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A configuration or preset is invalid."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the model."""


class ParseError(ValueError):
    """A manifest or image file could not be parsed."""


class PlanningError(ValueError):
    """A split plan cannot be produced for the given records."""


class WeightingError(ValueError):
    """Class weights are undefined (a class has no positives)."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. single-class AUROC)."""


class AggregationError(ValueError):
    """Too few folds to aggregate."""


class NonFiniteError(FloatingPointError):
    """A loss or activation became NaN or infinite."""
