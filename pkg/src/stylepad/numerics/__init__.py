"""Float64 tensors, reverse-mode gradients, layers and Adam."""
from . import functional
from .checkpoint import ContainerFormatError, load_tensors, save_tensors
from .functional import (
    batch_norm,
    conv1d,
    conv_transpose1d,
    group_norm,
    layer_norm,
    linear,
    log_softmax,
    max_pool1d,
    mse_loss,
    sinusoidal_timestep_embedding,
    softmax,
    softmax_cross_entropy,
)
from .layers import (
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    ParameterSet,
)
from .optim import Adam, AdamState, adam_step, step_decay
from .rng import RngStream
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    check_finite,
    concat,
    no_grad,
    parameter,
    relu,
    reverse_gradient,
    silu,
    stack,
    zero_grads,
)

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm1d",
    "Conv1d",
    "ConvTranspose1d",
    "ContainerFormatError",
    "GroupNorm",
    "LayerNorm",
    "Linear",
    "Module",
    "NonFiniteError",
    "ParameterSet",
    "RngStream",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "batch_norm",
    "check_finite",
    "concat",
    "conv1d",
    "conv_transpose1d",
    "functional",
    "group_norm",
    "layer_norm",
    "linear",
    "load_tensors",
    "log_softmax",
    "max_pool1d",
    "mse_loss",
    "no_grad",
    "parameter",
    "relu",
    "reverse_gradient",
    "save_tensors",
    "silu",
    "sinusoidal_timestep_embedding",
    "softmax",
    "softmax_cross_entropy",
    "stack",
    "step_decay",
    "zero_grads",
]
