"""Vision transformers, DeiT distillation and DenseNet baselines for
multi-label chest-radiograph classification, on a small numpy autograd."""

from . import data, evaluation, models, nn, saliency, tensor, training
from .errors import (
    AggregationError,
    CheckpointError,
    ConfigurationError,
    ContractError,
    DimensionError,
    NonFiniteError,
    ParseError,
    PlanningError,
    UndefinedMetricError,
    WeightingError,
)
from .models import Model, ModelSpec, build, get_spec, parameter_count
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
