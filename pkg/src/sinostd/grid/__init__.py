"""Minimal dense-tensor reverse-mode autodiff engine with Adam and checkpoints."""

from .checkpoint import (CheckpointError, OPTIM_MAGIC, PARAM_MAGIC, load_adam,
                         load_arrays, load_params_into, save_adam, save_arrays,
                         save_params)
from .functional import (avg_pool2d, conv2d, dense, group_norm, leaky_relu,
                         relu, replicate_pad2d, sigmoid, silu, softplus, tanh,
                         upsample2x)
from .gradcheck import GradCheckReport, finite_diff_check
from .optim import AdamState, adam_step
from .tensor import GridError, Tensor, as_tensor, cat, set_finite_checks

__all__ = [
    "Tensor", "GridError", "as_tensor", "cat", "set_finite_checks",
    "conv2d", "dense", "relu", "leaky_relu", "silu", "tanh", "sigmoid",
    "softplus", "group_norm", "avg_pool2d", "upsample2x", "replicate_pad2d",
    "AdamState", "adam_step",
    "GradCheckReport", "finite_diff_check",
    "PARAM_MAGIC", "OPTIM_MAGIC", "CheckpointError",
    "save_arrays", "load_arrays", "save_params", "load_params_into",
    "save_adam", "load_adam",
]
