from lapgsr.autograd.ops import (
    add,
    bicubic_resize,
    clamp,
    concat_channels,
    conv2d,
    instance_norm,
    leaky_relu,
    mean,
    mse,
    mul,
    relu,
    scale,
    shift,
    softplus,
    square,
    sub,
    sum_all,
    tanh_act,
)
from lapgsr.autograd.optim import AdamState, adam_step, kaiming_init, make_rng, zeros_param
from lapgsr.autograd.tensor import Tape, Tensor, as_tensor, backward, dump_tensor, precision

__all__ = [
    "AdamState", "Tape", "Tensor", "adam_step", "add", "as_tensor", "backward",
    "bicubic_resize", "clamp", "concat_channels", "conv2d", "dump_tensor",
    "instance_norm", "kaiming_init", "leaky_relu", "make_rng", "mean", "mse", "mul",
    "precision", "relu", "scale", "shift", "softplus", "square", "sub", "sum_all",
    "tanh_act", "zeros_param",
]
