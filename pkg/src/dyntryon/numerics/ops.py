"""Differentiable primitives.

Every primitive checks its output for NaN/Inf (raising ``NumericError``)
through the ``Tensor`` constructor. Only matmul contributes to the FLOP
counter.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, counters, make_result

# Additive mask value for blocked attention logits. Anything at or below
# MASK_THRESHOLD is treated as blocked by ``softmax``.
NEG_LARGE = -1.0e9
MASK_THRESHOLD = -1.0e8

GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are rejected by the Tensor check

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, p]``.

    Leading dimensions broadcast without materialising copies. Adds
    ``2*m*k*p*batch`` to the FLOP counter.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    k2, p = b.shape[-2:]
    if k != k2:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from exc
    batch = int(np.prod(batch_shape)) if batch_shape else 1
    counters.add_flops(2 * m * k * p * batch)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(np.matmul(a.data, b.data), (a, b), backward)


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [d_in, d_out]."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = matmul(x, weight) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), weight), (-1,))
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return make_result(np.array(x.data[key]), (x,), backward)


def take_rows(x, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-d tensor: ``out[...] = x[index[...]]``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-d tensor, got {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, x.shape[1]))
        return (full,)

    return make_result(x.data[index], (x,), backward)


def index_add(x, index: np.ndarray, src) -> Tensor:
    """Return ``x`` with ``src[i]`` added to row ``index[i]`` (repeats sum).

    Contributions are applied sequentially in index order, so the result is
    deterministic.
    """
    x, src = _pair(x, src)
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or src.ndim != 2 or src.shape != (index.size, x.shape[1]):
        raise DimensionError(f"index_add: x {x.shape}, src {src.shape}, index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    out = x.data.copy()
    np.add.at(out, index, src.data)

    def backward(g):
        return g, g[index]

    return make_result(out, (x, src), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# neural primitives
# ---------------------------------------------------------------------------

def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    Positions whose mask value is <= ``MASK_THRESHOLD`` get probability
    exactly 0. A row with every position blocked returns all zeros.
    """
    x = as_tensor(x)
    logits = x.data
    blocked = None
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        try:
            logits = logits + m.astype(x.dtype, copy=False)
        except ValueError as exc:
            raise DimensionError(f"softmax mask {m.shape} does not broadcast to {x.shape}") from exc
        blocked = np.broadcast_to(m <= MASK_THRESHOLD, logits.shape)
        logits = np.where(blocked, -np.inf, logits)
    row_max = logits.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(logits - row_max)
    total = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
    p = p.astype(x.dtype, copy=False)

    def backward(g):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)

    return make_result(p, (x,), backward)


def layer_norm(x, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    for p, name in ((gain, "gain"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm {name} shape {p.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def backward(g):
        gx = g * gain.data if gain is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return make_result(out.astype(x.dtype, copy=False), parents, backward)


def gelu(x) -> Tensor:
    """Tanh-approximation GELU."""
    x = as_tensor(x)
    a = x.data
    inner = _SQRT_2_OVER_PI * (a + GELU_COEFF * a * a * a)
    t = np.tanh(inner)
    out = 0.5 * a * (1.0 + t)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)

    return make_result(out, (x,), backward)


def silu(x) -> Tensor:
    x = as_tensor(x)
    a = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * a))
    out = a * sig

    def backward(g):
        return (g * sig * (1.0 + a * (1.0 - sig)),)

    return make_result(out, (x,), backward)
