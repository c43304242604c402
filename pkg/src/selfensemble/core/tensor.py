"""Array values with reverse-mode gradient tracking.

A :class:`Tensor` wraps a numpy array (rank <= 4) and remembers the
operation that produced it. Calling :func:`backward` on a scalar tensor walks
the recorded graph in reverse topological order and accumulates gradients
into every reachable :class:`Parameter`.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32
MAX_RANK = 4


class Tensor:
    """Immutable array value plus the graph edge that produced it."""

    __slots__ = ("data", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, dtype=None, *, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensors are limited to rank {MAX_RANK}, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def requires_grad(self):
        return bool(self._parents) or isinstance(self, Parameter)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


class Parameter(Tensor):
    """Learnable leaf tensor with a gradient buffer of identical shape."""

    __slots__ = ("name", "_touched")

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self._touched = False

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)
        self._touched = False

    def assign(self, value):
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"cannot assign shape {value.shape} to parameter "
                             f"{self.name!r} of shape {self.data.shape}")
        self.data = value
        if self.grad.shape != value.shape:
            self.grad = np.zeros_like(value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(param) into ``param.grad`` for reachable parameters.

    The loss must hold a single element. A graph can be backpropagated only
    once, and parameters carrying un-reset gradients from an earlier backward
    pass are rejected; call ``zero_grad`` (or an optimizer step) first.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward was already called on this graph")
    order = _topological_order(loss)
    params = [n for n in order if isinstance(n, Parameter)]
    stale = [p.name or repr(p) for p in params if p._touched]
    if stale:
        raise RuntimeError(f"parameters hold gradients from a previous backward pass "
                           f"(reset them first): {stale[:5]}")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g.astype(node.data.dtype, copy=False)
            node._touched = True
            continue
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    loss._consumed = True
