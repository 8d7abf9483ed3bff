"""Parameters, modules and the layers the model is assembled from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor, as_tensor, no_grad
from .conv import conv2d, conv2d_transpose, conv3d

SIGMA_FLOOR = 1e-12


class Parameter(Tensor):
    """Trainable tensor with its optimizer state attached."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Module:
    """Minimal module tree: parameters, buffers and a train/eval switch."""

    def __init__(self):
        self.training = True
        self._buffers: list[str] = []

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, np.asarray(value, dtype=np.float64))
        self._buffers.append(name)

    def children(self) -> Iterator[tuple[str, Module]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        state.update(self.named_buffers(prefix))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = dict(self.named_parameters(prefix))
        owners = {}
        self._collect_buffer_owners(prefix, owners)
        missing = [k for k in list(params) + list(owners) if k not in state]
        if missing:
            raise KeyError(f"checkpoint lacks entries: {missing[:5]}{' ...' if len(missing) > 5 else ''}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()
        for name, (module, attr) in owners.items():
            current = getattr(module, attr)
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != current.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {current.shape}")
            setattr(module, attr, value.copy())

    def _collect_buffer_owners(self, prefix, owners):
        for key in self._buffers:
            owners[prefix + key] = (self, key)
        for key, child in self.children():
            child._collect_buffer_owners(f"{prefix}{key}.", owners)

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def fan_in_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, c_in, c_out, rng, kernel=3, stride=1, dilation=1, padding="same", bias=True):
        super().__init__()
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.weight = Parameter(fan_in_normal(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class ConvTranspose2d(Module):
    """Stride-2 upsampling convolution; kernel layout ``[k, k, c_out, c_in]``."""

    def __init__(self, c_in, c_out, rng, kernel=4):
        super().__init__()
        taps = max(1, (kernel // 2) ** 2)
        self.weight = Parameter(fan_in_normal(rng, (kernel, kernel, c_out, c_in), taps * c_in))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        return conv2d_transpose(x, self.weight, self.bias, stride=2)


class Dense(Module):
    def __init__(self, n_in, n_out, rng, zero_weight=False):
        super().__init__()
        w = np.zeros((n_in, n_out)) if zero_weight else fan_in_normal(rng, (n_in, n_out), n_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x):
        return ops.matmul(x, self.weight) + self.bias


class BatchNorm(Module):
    """Per-channel normalization over every axis but the last."""

    def __init__(self, channels, epsilon=1e-5, momentum=0.1):
        super().__init__()
        self.epsilon, self.momentum = epsilon, momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta_shift = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta_shift, self, "train" if self.training else "infer",
                          self.epsilon, self.momentum)


def batch_norm(x, gamma, beta_shift, state=None, mode="train", epsilon=1e-5, momentum=0.1):
    """Batch normalization; ``state`` carries ``running_mean``/``running_var`` arrays.

    Training normalizes with the biased batch variance and folds the unbiased
    variance into the running estimate.
    """
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mu = ops.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = ops.mean(ops.square(centered), axis=axes, keepdims=True)
        if state is not None:
            n = x.size // x.shape[-1]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            state.running_mean = (1 - momentum) * state.running_mean + momentum * mu.data.reshape(-1)
            state.running_var = (1 - momentum) * state.running_var + momentum * unbiased
        normalized = centered / ops.sqrt(var + epsilon)
    elif mode == "infer":
        if state is None:
            raise ValueError("inference-mode batch_norm needs running statistics")
        normalized = (x - state.running_mean) / np.sqrt(state.running_var + epsilon)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return normalized * gamma + beta_shift


class Dropout(Module):
    """Inverted dropout: scales kept units by 1/(1-rate) in training, identity otherwise."""

    def __init__(self, rate, rng: np.random.Generator):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        if not self.training or self.rate == 0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return x * Tensor(keep / (1.0 - self.rate))


def _as_matrix(w: np.ndarray) -> np.ndarray:
    """Output channels (last axis) become rows."""
    return np.moveaxis(w, -1, 0).reshape(w.shape[-1], -1)


def power_iteration(matrix: np.ndarray, u: np.ndarray, iterations: int) -> tuple[np.ndarray, np.ndarray]:
    for _ in range(iterations):
        v = matrix.T @ u
        v = v / max(np.linalg.norm(v), SIGMA_FLOOR)
        u = matrix @ v
        u = u / max(np.linalg.norm(u), SIGMA_FLOOR)
    v = matrix.T @ u
    v = v / max(np.linalg.norm(v), SIGMA_FLOOR)
    return u, v


def spectral_normalize(weight, u: np.ndarray, iterations: int = 1, update: bool = True):
    """Divide ``weight`` by its power-iteration estimate of the largest singular value.

    The weight is viewed as a matrix with the last axis as rows. ``u`` is the
    persistent left vector; it is overwritten in place when ``update`` is set.
    Returns ``(normalized_weight, sigma_estimate)``.
    """
    weight = as_tensor(weight)
    mat = _as_matrix(weight.data)
    new_u, v = power_iteration(mat, u, iterations)
    if update:
        u[...] = new_u
    outer = np.outer(new_u, v).reshape((weight.shape[-1],) + weight.shape[:-1])
    outer = np.moveaxis(outer, 0, -1)
    sigma = ops.clamp_min(ops.sum(weight * Tensor(outer)), SIGMA_FLOOR)
    return weight / sigma, float(sigma.data)


class _SpectralConv(Module):
    def _init_sn(self, rng, warmup=30):
        mat = _as_matrix(self.weight.data)
        u = rng.normal(size=mat.shape[0])
        u /= np.linalg.norm(u)
        u, _ = power_iteration(mat, u, warmup)
        self.register_buffer("sn_u", u)

    def normalized_weight(self):
        w, _ = spectral_normalize(self.weight, self.sn_u, 1, update=self.training)
        return w


class SNConv2d(_SpectralConv):
    def __init__(self, c_in, c_out, rng, kernel=4, stride=1, padding=1):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = Parameter(fan_in_normal(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in))
        self.bias = Parameter(np.zeros(c_out))
        self._init_sn(rng)

    def forward(self, x):
        return conv2d(x, self.normalized_weight(), self.bias, self.stride, 1, self.padding)


class SNConv3d(_SpectralConv):
    def __init__(self, c_in, c_out, rng, kernel=4, temporal_kernel=2, stride=1, padding=1):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan = temporal_kernel * kernel * kernel * c_in
        self.weight = Parameter(fan_in_normal(rng, (temporal_kernel, kernel, kernel, c_in, c_out), fan))
        self.bias = Parameter(np.zeros(c_out))
        self._init_sn(rng)

    def forward(self, x):
        return conv3d(x, self.normalized_weight(), self.bias, spatial_stride=self.stride,
                      temporal_stride=1, padding=self.padding)


def operator_norm(matrix: np.ndarray) -> float:
    """Largest singular value of a (reshaped) weight via dense SVD."""
    with no_grad():
        return float(np.linalg.svd(_as_matrix(np.asarray(matrix)), compute_uv=False)[0])
