"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every ``Function.backward`` is written in terms of differentiable ``Tensor``
operations, so running it with graph recording enabled yields gradients that
can themselves be differentiated (needed by the gradient penalty).
"""
from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Sequence

import numpy as np

_state = threading.local()


class GraphError(RuntimeError):
    """Misuse of a recorded graph, e.g. a second backward pass over it."""


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.enabled = bool(mode)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """n-dimensional float64 array that can take part in a differentiation graph."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None

    # -- array-ish protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators (implemented in ops) -------------------------------------
    def __add__(self, other):
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __pow__(self, p):
        return ops.power(self, p)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def exp(self):
        return ops.exp(self)

    def log(self):
        return ops.log(self)

    def sqrt(self):
        return ops.power(self, 0.5)

    # -- differentiation ----------------------------------------------------
    def backward(self, grad=None, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        run_backward([self], [as_tensor(grad)], inputs=None, create_graph=False, retain_graph=retain_graph)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One recorded operation. Subclasses define ``forward`` (arrays) and ``backward`` (Tensors)."""

    def __init__(self, **attrs):
        self.__dict__.update(attrs)
        self.inputs: tuple[Tensor, ...] = ()
        self.consumed = False

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Sequence[Tensor | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        fn = cls(**attrs)
        tensors = tuple(as_tensor(x) for x in inputs)
        out = Tensor(fn.forward(*(t.data for t in tensors)))
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            fn.inputs = tensors
            out.requires_grad = True
            out._ctx = fn
        return out


def _toposort(roots: Iterable[Tensor]) -> list[Tensor]:
    """Tensors reachable from ``roots`` ordered so every tensor precedes its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
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
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
    order.reverse()
    return order


def run_backward(outputs, grad_outputs, inputs=None, create_graph=False, retain_graph=None):
    """Core reverse sweep.

    With ``inputs=None`` gradients are accumulated into leaf ``.grad`` buffers;
    otherwise the gradients with respect to ``inputs`` are returned as Tensors.
    """
    if retain_graph is None:
        retain_graph = create_graph
    wanted = {id(t): i for i, t in enumerate(inputs)} if inputs is not None else None
    found: list[Tensor | None] = [None] * (len(inputs) if inputs is not None else 0)

    grads: dict[int, Tensor] = {}
    for out, g in zip(outputs, grad_outputs):
        if not out.requires_grad:
            raise GraphError("output does not require grad; nothing was recorded")
        if g.shape != out.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match output shape {out.shape}")
        grads[id(out)] = grads[id(out)] + g if id(out) in grads else g

    for node in _toposort(outputs):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if wanted is not None and id(node) in wanted:
            found[wanted[id(node)]] = g
        ctx = node._ctx
        if ctx is None:
            if wanted is None:
                node.grad = g.data.copy() if node.grad is None else node.grad + g.data
            continue
        if ctx.consumed:
            raise GraphError(
                "graph already consumed by a previous backward pass; run a new forward "
                "or pass retain_graph=True"
            )
        with set_grad_enabled(create_graph):
            in_grads = ctx.backward(g)
        for parent, pg in zip(ctx.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{type(ctx).__name__}.backward produced {pg.shape} for input {parent.shape}"
                )
            prev = grads.get(id(parent))
            if prev is None:
                grads[id(parent)] = pg
            else:
                with set_grad_enabled(create_graph):
                    grads[id(parent)] = prev + pg
        if not retain_graph:
            ctx.consumed = True
    return found


def grad(outputs, inputs, grad_outputs=None, create_graph=False, retain_graph=None):
    """Gradients of ``outputs`` with respect to ``inputs`` (returned, not accumulated).

    Inputs that the outputs do not depend on get zero gradients.
    """
    single = isinstance(inputs, Tensor)
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    inputs = [inputs] if single else list(inputs)
    if grad_outputs is None:
        grad_outputs = [Tensor(np.ones_like(o.data)) for o in outputs]
    else:
        grad_outputs = [as_tensor(g) for g in (
            [grad_outputs] if isinstance(grad_outputs, (Tensor, np.ndarray)) else grad_outputs
        )]
    found = run_backward(outputs, grad_outputs, inputs=inputs,
                         create_graph=create_graph, retain_graph=retain_graph)
    result = [f if f is not None else Tensor(np.zeros_like(t.data)) for f, t in zip(found, inputs)]
    return result[0] if single else result


from . import ops  # noqa: E402  (operators above dispatch into ops)
