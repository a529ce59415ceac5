"""Dense-tensor substrate with reverse-mode autodiff."""

from .gradcheck import GRAD_CHECK_EPS, grad_check
from .nn import Conv2d, Embedding, LayerNorm, Linear, Module, Parameter
from .tensor import (
    LAYER_NORM_EPS,
    ConfigError,
    DimensionError,
    NumericError,
    Tensor,
    add,
    as_tensor,
    attention,
    concat,
    conv2d,
    default_dtype,
    div,
    exp,
    gelu,
    get_default_dtype,
    getitem,
    grad_enabled,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    pick,
    reshape,
    silu,
    softmax,
    sub,
    take,
    tanh,
    transpose,
    tsum,
    upsample2x,
)

__all__ = [name for name in dir() if not name.startswith("_")]
