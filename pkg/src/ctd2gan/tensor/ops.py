"""Differentiable elementwise, reduction, shape and activation operations."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .autograd import Function, ShapeError, Tensor, as_tensor

SELU_SCALE = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and g.shape[lead + i] != 1
    )
    return reshape(sum(g, axis=axes, keepdims=True), shape)


# -- arithmetic -------------------------------------------------------------
class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (neg(g),)


class Power(Function):
    def forward(self, a):
        return np.power(a, self.p)

    def backward(self, g):
        (a,) = self.inputs
        if self.p == 2:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, self.p - 1), float(self.p))),)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (mul(g, exp(self.inputs[0])),)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (div(g, self.inputs[0]),)


class ClampMin(Function):
    """max(a, lo) with a constant floor; gradient passes only where a > lo."""

    def forward(self, a):
        self.mask = (a > self.lo).astype(np.float64)
        return np.maximum(a, self.lo)

    def backward(self, g):
        return (mul(g, Tensor(self.mask)),)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(a):
    return Neg.apply(a)


def power(a, p):
    return Power.apply(a, p=p)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def sqrt(a):
    return Power.apply(a, p=0.5)


def clamp_min(a, lo: float):
    return ClampMin.apply(a, lo=lo)


def square(a):
    return Power.apply(a, p=2)


# -- reductions and shape ---------------------------------------------------
class Sum(Function):
    def forward(self, a):
        self.in_shape = a.shape
        self.axes = _norm_axis(self.axis, a.ndim)
        return np.sum(a, axis=self.axes, keepdims=self.keepdims)

    def backward(self, g):
        kept = list(self.in_shape)
        for ax in self.axes:
            kept[ax] = 1
        return (broadcast_to(reshape(g, tuple(kept)), self.in_shape),)


class BroadcastTo(Function):
    def forward(self, a):
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, g):
        return (sum_to(g, self.inputs[0].shape),)


class Reshape(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def backward(self, g):
        return (reshape(g, self.in_shape),)


class Transpose(Function):
    def forward(self, a):
        self.axes_ = tuple(range(a.ndim))[::-1] if self.axes is None else tuple(self.axes)
        return np.transpose(a, self.axes_)

    def backward(self, g):
        return (transpose(g, tuple(np.argsort(self.axes_))),)


class GetItem(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.array(a[self.idx], dtype=np.float64)

    def backward(self, g):
        return (Embed.apply(g, idx=self.idx, shape=self.in_shape),)


class Embed(Function):
    """Adjoint of indexing: scatter-add ``a`` into zeros of ``shape`` at ``idx``."""

    def forward(self, a):
        out = np.zeros(self.shape)
        np.add.at(out, self.idx, a)
        return out

    def backward(self, g):
        return (getitem(g, self.idx),)


class Concat(Function):
    def forward(self, *arrays):
        self.sizes = [x.shape[self.axis] for x in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g):
        out, start = [], 0
        ax = self.axis % g.ndim
        for n in self.sizes:
            idx = (slice(None),) * ax + (slice(start, start + n),)
            out.append(getitem(g, idx))
            start += n
        return out


class Pad(Function):
    def forward(self, a):
        self.crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(self.widths, a.shape))
        return np.pad(a, self.widths)

    def backward(self, g):
        return (getitem(g, self.crop),)


class MatMul(Function):
    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape):
    shape = tuple(shape)
    a = as_tensor(a)
    if a.shape == shape:
        return a
    return BroadcastTo.apply(a, shape=shape)


def reshape(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None):
    return Transpose.apply(a, axes=axes)


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, idx):
    return GetItem.apply(a, idx=idx)


def concat(tensors, axis=-1):
    return Concat.apply(*tensors, axis=axis)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def pad(a, widths):
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    if not any(lo or hi for lo, hi in widths):
        return as_tensor(a)
    return Pad.apply(a, widths=widths)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


# -- activations ------------------------------------------------------------
class Selu(Function):
    def forward(self, a):
        neg_part = SELU_ALPHA * np.expm1(np.minimum(a, 0.0))
        return SELU_SCALE * np.where(a > 0, a, neg_part)

    def backward(self, g):
        (a,) = self.inputs
        pos = Tensor((a.data > 0).astype(np.float64))
        negm = Tensor((a.data <= 0).astype(np.float64))
        deriv = add(mul(pos, SELU_SCALE), mul(exp(mul(a, negm)), mul(negm, SELU_SCALE * SELU_ALPHA)))
        return (mul(g, deriv),)


class Sigmoid(Function):
    def forward(self, a):
        return expit(a)

    def backward(self, g):
        s = sigmoid(self.inputs[0])
        return (mul(g, mul(s, sub(1.0, s))),)


class Softplus(Function):
    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, g):
        return (mul(g, sigmoid(self.inputs[0])),)


def selu(x):
    return Selu.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def softplus(x):
    return Softplus.apply(x)


def leaky_relu(x, slope: float = 0.2):
    x = as_tensor(x)
    return mul(x, Tensor(np.where(x.data > 0, 1.0, slope)))


def abs(x):
    """|x| with slope sign(x); zero slope at 0."""
    x = as_tensor(x)
    return mul(x, Tensor(np.sign(x.data)))


def softmax(x, axis: int = -1):
    x = as_tensor(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, sum(e, axis=axis, keepdims=True))


def activation(x, kind: str, axis: int = -1):
    """Dispatch by name: ``selu``, ``sigmoid``, ``leaky_relu`` (slope 0.2) or ``softmax``."""
    if kind == "selu":
        return selu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.2)
    if kind == "softmax":
        return softmax(x, axis=axis)
    raise ValueError(f"unknown activation {kind!r}")


def global_average_pool(x):
    """Per-channel mean over the spatial axes of a channels-last map ``[..., h, w, c]``."""
    x = as_tensor(x)
    return mean(x, axis=(x.ndim - 3, x.ndim - 2))


def l2_norm(x, axis=-1, floor: float = 1e-12):
    return clamp_min(sqrt(clamp_min(sum(square(x), axis=axis, keepdims=True), floor * floor)), floor)
