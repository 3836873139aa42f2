"""Minimal float64 neural-network stack: tensors with reverse-mode
autodiff, MLP blocks over a flat parameter store, Adam, and bit-exact
parameter serialization."""

from .mlp import (
    GradReport,
    MlpSpec,
    ParameterStore,
    forward_mlp,
    grad_report,
    init_mlp_params,
)
from .optim import AdamConfig, AdamState, init_adam, optimizer_step
from .serialize import load_params, save_params
from .tensor import (
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    column,
    concat_cols,
    constant,
    exp,
    gather,
    gather_rows,
    log_sigmoid,
    matmul,
    mul,
    relu,
    scale,
    segment_logsumexp,
    segment_sum,
    shift,
    sigmoid,
    softplus,
    stop_gradient,
    sub,
    tanh,
    total_mean,
    total_sum,
)

__all__ = [
    "AdamConfig",
    "AdamState",
    "GradReport",
    "MlpSpec",
    "ParameterStore",
    "Tape",
    "Tensor",
    "add",
    "add_bias",
    "backward",
    "column",
    "concat_cols",
    "constant",
    "exp",
    "forward_mlp",
    "gather",
    "gather_rows",
    "grad_report",
    "init_adam",
    "init_mlp_params",
    "load_params",
    "log_sigmoid",
    "matmul",
    "mul",
    "optimizer_step",
    "relu",
    "save_params",
    "scale",
    "segment_logsumexp",
    "segment_sum",
    "shift",
    "sigmoid",
    "softplus",
    "stop_gradient",
    "sub",
    "tanh",
    "total_mean",
    "total_sum",
]
