"""Channels-last N-d convolution with its two adjoints.

``conv_nd``, ``conv_input_grad`` and ``conv_weight_grad`` are closed under
differentiation: the gradient of each is expressed through the other two, so
any order of derivative stays inside this file.

Layouts: input ``[B, *spatial, C_in]``, kernel ``[*k, C_in, C_out]``.
"""
from __future__ import annotations

import itertools

import numpy as np

from . import ops
from .autograd import Function, ShapeError, Tensor, as_tensor


def _out_extent(size, k, stride, dilation):
    return (size - dilation * (k - 1) - 1) // stride + 1


def _offsets(ksize, out, stride, dilation):
    """(kernel index, input slice) pairs; the slice picks every input a kernel tap touches."""
    n = len(ksize)
    for kidx in itertools.product(*(range(k) for k in ksize)):
        yield kidx, (slice(None),) + tuple(
            slice(kidx[i] * dilation[i], kidx[i] * dilation[i] + stride[i] * (out[i] - 1) + 1, stride[i])
            for i in range(n)
        )


def _check_fits(spatial, ksize, stride, dilation):
    out = [_out_extent(s, k, st, d) for s, k, st, d in zip(spatial, ksize, stride, dilation)]
    if min(out) < 1:
        raise ShapeError(
            f"kernel {tuple(ksize)} (dilation {tuple(dilation)}) does not fit input extent {tuple(spatial)}"
        )
    return out


# One small GEMM per kernel tap; cheaper than an im2col buffer at these channel widths.
def _conv_forward(x, w, stride, dilation):
    n = w.ndim - 2
    out = _check_fits(x.shape[1:1 + n], w.shape[:n], stride, dilation)
    y = np.zeros((x.shape[0], *out, w.shape[-1]))
    for kidx, sl in _offsets(w.shape[:n], out, stride, dilation):
        y += x[sl] @ w[kidx]
    return y


def _conv_input_grad(g, w, in_spatial, stride, dilation):
    n = w.ndim - 2
    dx = np.zeros((g.shape[0], *in_spatial, w.shape[-2]))
    for kidx, sl in _offsets(w.shape[:n], g.shape[1:1 + n], stride, dilation):
        dx[sl] += g @ w[kidx].T
    return dx


def _conv_weight_grad(x, g, ksize, stride, dilation):
    n = len(ksize)
    g2 = g.reshape(-1, g.shape[-1])
    gw = np.empty((*ksize, x.shape[-1], g.shape[-1]))
    for kidx, sl in _offsets(ksize, g.shape[1:1 + n], stride, dilation):
        gw[kidx] = x[sl].reshape(-1, x.shape[-1]).T @ g2
    return gw


class ConvND(Function):
    def forward(self, x, w):
        if x.shape[-1] != w.shape[-2]:
            raise ShapeError(
                f"input has {x.shape[-1]} channels but kernel {w.shape} expects {w.shape[-2]}"
            )
        return _conv_forward(x, w, self.stride, self.dilation)

    def backward(self, g):
        x, w = self.inputs
        n = w.ndim - 2
        gx = conv_input_grad(g, w, x.shape[1:1 + n], self.stride, self.dilation) if x.requires_grad else None
        gw = conv_weight_grad(x, g, w.shape[:n], self.stride, self.dilation) if w.requires_grad else None
        return gx, gw


class ConvInputGrad(Function):
    def forward(self, g, w):
        return _conv_input_grad(g, w, self.in_spatial, self.stride, self.dilation)

    def backward(self, gg):
        g, w = self.inputs
        n = w.ndim - 2
        dg = conv_nd(gg, w, self.stride, self.dilation) if g.requires_grad else None
        dw = conv_weight_grad(gg, g, w.shape[:n], self.stride, self.dilation) if w.requires_grad else None
        return dg, dw


class ConvWeightGrad(Function):
    def forward(self, x, g):
        return _conv_weight_grad(x, g, self.ksize, self.stride, self.dilation)

    def backward(self, gw):
        x, g = self.inputs
        n = len(self.ksize)
        dx = conv_input_grad(g, gw, x.shape[1:1 + n], self.stride, self.dilation) if x.requires_grad else None
        dg = conv_nd(x, gw, self.stride, self.dilation) if g.requires_grad else None
        return dx, dg


def conv_nd(x, w, stride, dilation):
    """Valid (unpadded) strided, dilated cross-correlation."""
    return ConvND.apply(x, w, stride=tuple(stride), dilation=tuple(dilation))


def conv_input_grad(g, w, in_spatial, stride, dilation):
    return ConvInputGrad.apply(g, w, in_spatial=tuple(in_spatial), stride=tuple(stride),
                               dilation=tuple(dilation))


def conv_weight_grad(x, g, ksize, stride, dilation):
    return ConvWeightGrad.apply(x, g, ksize=tuple(ksize), stride=tuple(stride),
                                dilation=tuple(dilation))


def same_padding(size: int, k: int, stride: int, dilation: int = 1) -> tuple[int, int]:
    """(before, after) padding giving ``ceil(size / stride)`` outputs; extra pixel goes after."""
    eff = dilation * (k - 1) + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + eff - size, 0)
    return total // 2, total - total // 2


def _pad_spec(padding, spatial, ksize, stride, dilation):
    if padding == "valid":
        return [(0, 0)] * len(spatial)
    if padding == "same":
        return [same_padding(s, k, st, d) for s, k, st, d in zip(spatial, ksize, stride, dilation)]
    if isinstance(padding, int):
        return [(padding, padding)] * len(spatial)
    return [tuple(p) for p in padding]


def _batched(x, rank):
    x = as_tensor(x)
    if x.ndim == rank - 1:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def conv2d(x, kernel, bias=None, stride: int = 1, dilation: int = 1, padding="same"):
    """2-D cross-correlation of ``[B,]h,w,c_in`` with ``[k,k,c_in,c_out]``.

    ``padding`` is ``"same"``, ``"valid"``, an int, or explicit ``((top, bottom), (left, right))``.
    """
    if stride < 1 or dilation < 1:
        raise ValueError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    x, unbatched = _batched(x, 4)
    kernel = as_tensor(kernel)
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [k, k, c_in, c_out], got {kernel.shape}")
    if x.shape[-1] != kernel.shape[2]:
        raise ShapeError(f"input has {x.shape[-1]} channels but kernel {kernel.shape} expects {kernel.shape[2]}")
    st, dl = (stride, stride), (dilation, dilation)
    widths = _pad_spec(padding, x.shape[1:3], kernel.shape[:2], st, dl)
    x = ops.pad(x, [(0, 0), *widths, (0, 0)])
    y = conv_nd(x, kernel, st, dl)
    if bias is not None:
        y = y + bias
    return ops.reshape(y, y.shape[1:]) if unbatched else y


def conv2d_transpose(x, kernel, bias=None, stride: int = 2):
    """Fractionally strided convolution doubling the spatial extent.

    Exactly the adjoint of ``conv2d(·, kernel, stride=2, padding="same")`` on an
    input of twice the extent; ``kernel`` is ``[k, k, c_out, c_in]``.
    """
    if stride != 2:
        raise ValueError(f"conv2d_transpose supports stride 2 only, got {stride}")
    x, unbatched = _batched(x, 4)
    kernel = as_tensor(kernel)
    if x.shape[-1] != kernel.shape[3]:
        raise ShapeError(f"input has {x.shape[-1]} channels but kernel {kernel.shape} expects {kernel.shape[3]}")
    k = kernel.shape[:2]
    out_sp = (2 * x.shape[1], 2 * x.shape[2])
    widths = [same_padding(s, kk, stride) for s, kk in zip(out_sp, k)]
    padded = tuple(s + lo + hi for s, (lo, hi) in zip(out_sp, widths))
    y = conv_input_grad(x, kernel, padded, (stride, stride), (1, 1))
    crop = (slice(None),) + tuple(slice(lo, lo + s) for (lo, _), s in zip(widths, out_sp)) + (slice(None),)
    if any(lo or hi for lo, hi in widths):
        y = ops.getitem(y, crop)
    if bias is not None:
        y = y + bias
    return ops.reshape(y, y.shape[1:]) if unbatched else y


def conv3d(x, kernel, bias=None, spatial_stride: int = 1, temporal_stride: int = 1, padding=0):
    """3-D cross-correlation over ``[B,]d,h,w,c_in`` with ``[k_t,k,k,c_in,c_out]``.

    Only the spatial axes are padded; the temporal axis is always valid.
    """
    x, unbatched = _batched(x, 5)
    kernel = as_tensor(kernel)
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be [k_t, k, k, c_in, c_out], got {kernel.shape}")
    if x.shape[1] < kernel.shape[0]:
        raise ShapeError(f"temporal extent {x.shape[1]} is smaller than temporal kernel {kernel.shape[0]}")
    if x.shape[-1] != kernel.shape[3]:
        raise ShapeError(f"input has {x.shape[-1]} channels but kernel {kernel.shape} expects {kernel.shape[3]}")
    st = (temporal_stride, spatial_stride, spatial_stride)
    widths = _pad_spec(padding, x.shape[2:4], kernel.shape[1:3], st[1:], (1, 1))
    x = ops.pad(x, [(0, 0), (0, 0), *widths, (0, 0)])
    y = conv_nd(x, kernel, st, (1, 1, 1))
    if bias is not None:
        y = y + bias
    return ops.reshape(y, y.shape[1:]) if unbatched else y
