"""Minimal reverse-mode autodiff over numpy arrays, double precision.

Just enough ops for an encoder-decoder attention model: broadcasting
elementwise arithmetic, (batched) matmul, embedding lookup, layer norm,
softmax/log-softmax over the last axis, relu, reshape/transpose, reductions,
and a gather along the last axis. Backward closures accumulate into `.grad`
of tensors with `requires_grad`.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Reverse pass from this (scalar) tensor; accumulates leaf grads."""
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar tensor")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        self._grad_owned = True
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def accumulate(self, grad: np.ndarray) -> None:
        """Add an incoming gradient without mutating buffers we don't own.

        The first contribution is stored by reference (ops may pass views or
        shared arrays); a second contribution allocates a fresh sum, after
        which in-place accumulation is safe.
        """
        if self.grad is None:
            self.grad = grad
            self._grad_owned = False
        elif not self._grad_owned:
            self.grad = self.grad + grad
            self._grad_owned = True
        else:
            self.grad += grad

    # Operator sugar (constants are wrapped as non-grad tensors).
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward=backward if needs else None)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _result(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _result(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _result(out_data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > 0.0))

    return _result(out_data, (a,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    out_data = weight.data[ids]

    def backward(g):
        if weight.requires_grad:
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
                weight._grad_owned = True
            elif not weight._grad_owned:
                weight.grad = weight.grad.copy()
                weight._grad_owned = True
            np.add.at(weight.grad, ids, g)

    return _result(out_data, (weight,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv_std * (dxhat - m1 - xhat * m2))

    return _result(out_data, (x, gain, bias), backward)


def softmax_last(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out_data = exp / exp.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            x.accumulate(out_data * (g - inner))

    return _result(out_data, (x,), backward)


def log_softmax_last(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - log_z

    def backward(g):
        if x.requires_grad:
            x.accumulate(g - np.exp(out_data) * g.sum(axis=-1, keepdims=True))

    return _result(out_data, (x,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.data.shape))

    return _result(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    out_data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.transpose(inverse))

    return _result(out_data, (a,), backward)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.expand_dims(g, axis).repeat(a.data.shape[axis], axis=axis))

    return _result(out_data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _result(out_data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def neg_log_sigmoid(a: Tensor) -> Tensor:
    """-log(sigmoid(x)) elementwise, computed stably as log(1 + exp(-x))."""
    out_data = np.logaddexp(0.0, -a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (-1.0 / (1.0 + np.exp(a.data))))

    return _result(out_data, (a,), backward)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select a[..., idx[...]] along the last axis; idx has a's shape minus it."""
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
            a.accumulate(full)

    return _result(out_data, (a,), backward)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
