"""Tensor type and reverse-mode differentiation engine.

A :class:`Tensor` wraps a numpy array.  Ops in :mod:`appledx.ops` record a
:class:`GraphNode` on their output whenever grad mode is on and at least one
input requires a gradient.  :func:`backward` walks the recorded graph once in
reverse topological order, accumulates gradients into leaf tensors and then
drops the graph.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GraphError, UsageError

_state = threading.local()

FLOAT32 = np.dtype(np.float32)
FLOAT64 = np.dtype(np.float64)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", FLOAT32)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (FLOAT32, FLOAT64):
        raise ValueError(f"unsupported precision {dtype}")
    previous = get_default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    previous = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


class GraphNode:
    """One recorded op: its inputs and the rule mapping output grad to input grads.

    ``backward_fn(grad, needs)`` returns one entry per input; ``needs[i]`` is
    False when input ``i`` does not require a gradient, in which case the rule
    may return None for it.
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"GraphNode({self.op}, inputs={len(self.inputs)})"


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (FLOAT32, FLOAT64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[GraphNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def node(self) -> Optional[GraphNode]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self) -> "Tensor":
        from .ops import sum_all

        return sum_all(self)

    def __add__(self, other):
        from .ops import add, scale

        if isinstance(other, Tensor):
            return add(self, other)
        return scale(self, 1.0, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import mul, scale

        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scale

        return scale(self, -1.0)

    def __sub__(self, other):
        return self + (-other)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"


def _topological_order(root: Tensor) -> list:
    """Non-leaf tensors reachable from ``root``, outputs before their inputs."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited or tensor._node is None:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        for parent in tensor._node.inputs:
            if parent._node is not None and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf tensor that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` buffers.  The graph below
    ``loss`` is released afterwards, so a second call raises UsageError.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    grads = {id(loss): seed}
    for tensor in _topological_order(loss):
        grad = grads.pop(id(tensor), None)
        node = tensor._node
        tensor._node = None
        if grad is None:
            continue
        needs = tuple(p.requires_grad for p in node.inputs)
        input_grads = node.backward_fn(grad, needs)
        if len(input_grads) != len(node.inputs):
            raise GraphError(f"{node.op}: backward returned {len(input_grads)} grads for {len(node.inputs)} inputs")
        for parent, parent_grad in zip(node.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise GraphError(f"{node.op}: grad shape {parent_grad.shape} != input shape {parent.shape}")
            parent_grad = parent_grad.astype(parent.dtype, copy=False)
            if parent._node is None:
                if parent.grad is None:
                    parent.grad = np.array(parent_grad, copy=True)
                else:
                    parent.grad = parent.grad + parent_grad
            else:
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
