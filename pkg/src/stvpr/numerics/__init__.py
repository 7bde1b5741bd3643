from . import rng, tsr
from .gradcheck import grad_check, grad_check_report
from .registry import ParameterRegistry
from .tensor import (
    Tensor,
    add,
    as_tensor,
    bilinear_sample,
    broadcast_to,
    clamp,
    concat,
    div,
    dropout,
    exp,
    gelu,
    index,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    scale,
    shift,
    softmax,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)
