"""Differentiable operators over :class:`Tensor` values.

Every operator returns a new tensor; when any input participates in a
gradient computation, the result records a closure mapping the output
gradient to one gradient per input.
"""

import numpy as np

from .tensor import Tensor, as_tensor

# direct sums longer than this are accumulated in float64
_WIDE_SUM = 10_000


def _result(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, dtype=data.dtype, _parents=tuple(parents), _backward=backward)
    return Tensor(data, dtype=data.dtype)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if count > _WIDE_SUM:
        return x.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    return x.mean(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), _backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _backward)


def relu(x):
    """Elementwise ``max(0, x)``; the derivative at exactly zero is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0

    def _backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), _backward)


# ---------------------------------------------------------------- reductions / shape

def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), _backward)


def reshape(x, shape):
    x = as_tensor(x)

    def _backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), _backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


def global_average_pool(x):
    """Per-channel spatial mean: ``[N, C, H, W] -> [N, C, 1, 1]``."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_average_pool expects [N, C, H, W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def _backward(g):
        return (np.broadcast_to(g / hw, x.shape).astype(x.dtype),)

    return _result(_mean(x.data, axis=(2, 3), keepdims=True), (x,), _backward)


def softmax_over_channels(x):
    """Softmax along axis 1 with max subtraction for stability."""
    x = as_tensor(x)
    if x.data.ndim < 2 or x.shape[1] < 1:
        raise ValueError(f"softmax_over_channels expects a channel axis, got {x.shape}")
    # float64 internals keep channel sums within a float32 ulp of 1
    shifted = x.data.astype(np.float64) - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (x,), _backward)


# ---------------------------------------------------------------- linear layers

def fully_connected(x, weight, bias):
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``[N, Cin]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"fully_connected expects [N, Cin] and [Cout, Cin], "
                         f"got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"inner dimension mismatch: input has {x.shape[1]} features, "
                         f"weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")

    def _backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _result(x.data @ weight.data.T + bias.data, (x, weight, bias), _backward)


def _im2col(xp, k, h, w):
    """``[N, C, H+k-1, W+k-1]`` -> ``[N, C*k*k, H*W]`` (channel-major, then kernel offset)."""
    n, c = xp.shape[:2]
    cols = np.stack([xp[:, :, i:i + h, j:j + w] for i in range(k) for j in range(k)], axis=2)
    return cols.reshape(n, c * k * k, h * w)


def conv2d(x, kernel, bias):
    """Zero-padded "same" cross-correlation.

    ``x`` is ``[N, Cin, H, W]``, ``kernel`` is ``[Cout, Cin, k, k]`` with odd
    ``k`` and ``bias`` is ``[Cout]``. Output is ``[N, Cout, H, W]``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects [N, Cin, H, W] and [Cout, Cin, k, k], "
                         f"got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ValueError(f"channel mismatch: input has {cin} channels, kernel expects {kcin}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    p = (k - 1) // 2
    cols = _im2col(np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))), k, h, w)
    wmat = kernel.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(n, cout, h, w) + bias.data[:, None, None]

    def _backward(g):
        gflat = g.reshape(n, cout, h * w)
        gk = np.einsum("nop,nqp->oq", gflat, cols, optimize=True).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            # input gradient is a "same" correlation of g with the flipped, transposed kernel
            gcols = _im2col(np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))), k, h, w)
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gx = (flipped @ gcols).reshape(n, cin, h, w)
        return gx, gk, gb

    return _result(out, (x, kernel, bias), _backward)


# ---------------------------------------------------------------- losses

def mse_loss(prediction, target):
    """Mean squared difference as a one-element tensor."""
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {prediction.shape} vs target {target.shape}")
    diff = prediction.data - target.data
    count = diff.size
    value = np.asarray(_mean(diff * diff), dtype=prediction.dtype)

    def _backward(g):
        gd = (2.0 / count) * g * diff
        return gd, -gd

    return _result(value, (prediction, target), _backward)
