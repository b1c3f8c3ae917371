from .checkpoint import CheckpointError, load_arrays, save_arrays
from .ops import (
    PROB_CLIP,
    batch_norm,
    bce_loss,
    concat,
    conv2d,
    conv_transpose2d,
    depthwise_highpass,
    fully_connected,
    global_avg_pool,
    leaky_relu,
    max_pool2d,
    mean,
    reshape,
    sigmoid,
    slice_rows,
    straight_through,
    sum_all,
    tanh,
)
from .optim import AdamState, NonFiniteGradient, ParamSet, adam_step
from .tensor import ShapeError, Tensor, backward

__all__ = [
    "AdamState",
    "CheckpointError",
    "NonFiniteGradient",
    "PROB_CLIP",
    "ParamSet",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "batch_norm",
    "bce_loss",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "depthwise_highpass",
    "fully_connected",
    "global_avg_pool",
    "leaky_relu",
    "load_arrays",
    "max_pool2d",
    "mean",
    "reshape",
    "save_arrays",
    "sigmoid",
    "slice_rows",
    "straight_through",
    "sum_all",
    "tanh",
]
