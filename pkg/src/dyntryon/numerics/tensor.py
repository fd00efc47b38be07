"""Dense tensors with reverse-mode autodiff and allocation/FLOP counters."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; results are plain constants."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass
class InstrumentCounters:
    """Forward FLOPs (2 per multiply-accumulate) and live tensor bytes.

    ``reset`` opens a new measurement region: tensors allocated before it are
    not charged to the region, and their release does not decrement it.
    """

    flops: int = 0
    peak_live_bytes: int = 0
    current_live_bytes: int = 0
    tagged_flops: dict[str, int] = field(default_factory=dict)
    epoch: int = 0
    _tags: list[str] = field(default_factory=list, repr=False)

    def reset(self) -> None:
        self.flops = 0
        self.peak_live_bytes = 0
        self.current_live_bytes = 0
        self.tagged_flops = {}
        self.epoch += 1

    def add_flops(self, n: int) -> None:
        self.flops += n
        for tag in self._tags:
            self.tagged_flops[tag] = self.tagged_flops.get(tag, 0) + n

    def allocate(self, nbytes: int) -> int:
        self.current_live_bytes += nbytes
        if self.current_live_bytes > self.peak_live_bytes:
            self.peak_live_bytes = self.current_live_bytes
        return self.epoch

    def release(self, nbytes: int, epoch: int) -> None:
        if epoch == self.epoch:
            self.current_live_bytes -= nbytes

    @contextlib.contextmanager
    def tag(self, name: str):
        """Attribute matmul FLOPs issued inside the block to ``name`` as well."""
        self._tags.append(name)
        try:
            yield
        finally:
            self._tags.pop()

    def snapshot(self) -> dict:
        return {
            "flops": self.flops,
            "peak_live_bytes": self.peak_live_bytes,
            "current_live_bytes": self.current_live_bytes,
            "tagged_flops": dict(self.tagged_flops),
        }


counters = InstrumentCounters()


class Tensor:
    """An n-d array node in a dynamically built computation graph.

    Only leaf tensors (those created directly, e.g. parameters or inputs)
    accumulate ``grad``; interior gradients are transient unless
    ``retain_grad()`` was called on the node.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_retain", "_charge", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError("non-finite value in tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._retain = False
        self._charge = (arr.nbytes, counters.allocate(arr.nbytes))

    def __del__(self):
        # cheaper than weakref.finalize; runs at the same refcount drop
        charge = getattr(self, "_charge", None)
        if charge is not None:
            counters.release(*charge)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def retain_grad(self) -> Tensor:
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar (implemented in ops) ---------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor in the default (or given) dtype."""
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = x.dtype if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap a primitive's output, recording the graph edge when needed."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=parents, _backward=backward_fn)
    return Tensor(data, dtype=data.dtype)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain_graph:
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None
