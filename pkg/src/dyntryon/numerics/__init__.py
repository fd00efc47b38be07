"""Minimal dense tensor engine: autodiff, primitives, AdamW, counters."""

from . import dten, ops
from .nn import LayerNorm, Linear, Module, param
from .ops import (
    GELU_COEFF,
    MASK_THRESHOLD,
    NEG_LARGE,
    add,
    div,
    gelu,
    getitem,
    index_add,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    reshape,
    silu,
    softmax,
    square,
    sub,
    sum,
    swapaxes,
    take_rows,
    transpose,
)
from .optim import AdamState, AdamW, adamw_step
from .tensor import (
    ContractError,
    DimensionError,
    InstrumentCounters,
    NumericError,
    Tensor,
    as_tensor,
    backward,
    counters,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    no_grad,
    set_default_dtype,
    tensor,
)
from .gradcheck import gradcheck, numerical_grad

softmax_lastdim = softmax

__all__ = [name for name in dir() if not name.startswith("_")]
