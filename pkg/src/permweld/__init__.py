"""permweld: merge small MLP classifiers by neuron-permutation alignment.

Train fully connected classifiers on different datasets, align their hidden
neurons (weight matching, flat weight matching, straight-through estimation,
diagonal-Fisher weighting), interpolate the aligned weights, and measure what
happens to the loss landscape along the way.  A gradient-matching condenser
distills datasets down to a few points per class so alignment can run without
the original data.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataIOError,
    FormatError,
    NumericError,
    PermweldError,
    ValidationError,
)
from .nnet import (
    GradBundle,
    MlpParams,
    MlpSpec,
    flatten,
    forward,
    init_params,
    loss_and_grad,
    predict_accuracy,
    unflatten,
)

__all__ = [
    "ConfigError",
    "DataIOError",
    "FormatError",
    "GradBundle",
    "MlpParams",
    "MlpSpec",
    "NumericError",
    "PermweldError",
    "ValidationError",
    "flatten",
    "forward",
    "init_params",
    "loss_and_grad",
    "predict_accuracy",
    "unflatten",
]
