"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5, index=None) -> np.ndarray:
    """d fn() / d x by central differences, optionally only at ``index`` (flat positions)."""
    flat = x.data.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = np.zeros(flat.size)
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn().data.sum())
        flat[i] = orig - step
        lo = float(fn().data.sum())
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    Entries whose gradient is below ``floor`` are judged on absolute error:
    parameters with an exactly zero true gradient (key biases under softmax
    shift invariance) otherwise turn finite-difference round-off into a
    large ratio. :func:`gradcheck` sets the floor from the largest gradient
    over all checked inputs.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backprop against central differences; return the worst relative error.

    ``fn`` must rebuild the graph on every call from the current ``inputs``
    data. With ``samples`` set, only that many random entries per input are
    probed.
    """
    for x in inputs:
        x.grad = None
    out = fn()
    if out.size != 1:
        out = out.sum()
    backward(out)
    rng = rng or np.random.default_rng(0)
    pairs = []
    for x in inputs:
        analytic = np.zeros(x.size) if x.grad is None else x.grad.astype(np.float64).reshape(-1)
        if samples is None or samples >= x.size:
            index = np.arange(x.size)
        else:
            index = rng.choice(x.size, size=samples, replace=False)
        numeric = numerical_grad(fn, x, step, index).reshape(-1)
        pairs.append((analytic[index], numeric[index]))
    scale = max((float(np.abs(n).max(initial=0.0)) for _, n in pairs), default=0.0)
    floor = max(1e-3 * scale, 1e-8)
    return max((relative_error(a, n, floor) for a, n in pairs), default=0.0)
