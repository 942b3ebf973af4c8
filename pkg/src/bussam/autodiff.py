"""Tensor container and reverse-mode differentiation.

Every primitive in :mod:`bussam.ops` produces a :class:`Tensor` holding a
closure that maps the output gradient to input gradients. ``backward`` walks
the recorded nodes in exact reverse creation order.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from bussam.errors import NonFiniteError, UsageError

_counter = itertools.count()
_grad_enabled = True
_detect_anomaly = False


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly() -> Iterator[None]:
    """Raise :class:`NonFiniteError` as soon as a primitive emits NaN/Inf."""
    global _detect_anomaly
    prev = _detect_anomaly
    _detect_anomaly = True
    try:
        yield
    finally:
        _detect_anomaly = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array participating in a differentiation graph.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their precision; anything else becomes
        float32.
    requires_grad : bool
        Whether gradients should be accumulated into ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise UsageError(f"tensors are limited to rank 4, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def backward(self) -> "GradTape":
        return backward(self)

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from bussam import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from bussam import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from bussam import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from bussam import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from bussam import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from bussam import ops
        return ops.div(other, self)

    def __neg__(self):
        from bussam import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent: float):
        from bussam import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from bussam import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from bussam import ops
        return ops.getitem(self, index)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap a primitive's output; records the node when any parent needs grad."""
    if _detect_anomaly and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'", op=op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass
class GradTape:
    """Result of a backward pass.

    ``ops`` lists the visited operations in the order the backward pass
    processed them; ``grads`` maps ``id(leaf)`` to the accumulated gradient.
    """

    ops: list[str] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def grad_for(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = GradTape()
    if not loss.requires_grad:
        return tape

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = pending.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g if t.grad is None else t.grad + g
            tape.grads[id(t)] = t.grad
            continue
        tape.ops.append(t.op)
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent._id)
            pending[parent._id] = pg if prev is None else prev + pg
    return tape
