"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import autograd, conv, nn, ops
from .tensor.autograd import Tensor

STEP = 1e-5
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    instances: int
    tolerance: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over elements."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``x`` (mutated and restored in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[j] = (hi - lo) / (2 * step)
    return out


def check_function(fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                   rng: np.random.Generator) -> float:
    """Compare d<fn(x), R>/dx by autograd and by central differences for every input."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def scalar():
        out = fn([Tensor(a) for a in arrays])
        return float(np.sum(out.data * probe))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(leaves)
    probe = rng.normal(size=out.shape)
    ops.sum(out * Tensor(probe)).backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        numeric = numeric_gradient(scalar, arr)
        worst = max(worst, relative_error(analytic.reshape(-1), numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _gp_loss(ts, u1, u2):
    # power iteration run to convergence, where treating u, v as constants is exact
    x, w, w2 = ts
    x = Tensor(x.data, requires_grad=True) if not x.requires_grad else x
    ws, _ = nn.spectral_normalize(w, u1, 200, update=False)
    w2s, _ = nn.spectral_normalize(w2, u2, 200, update=False)
    h = ops.leaky_relu(conv.conv2d(x, ws, stride=2, padding=1), 0.2)
    score = ops.mean(conv.conv2d(h, w2s, stride=1, padding=1))
    g = autograd.grad(score, x, create_graph=True)
    norm = ops.sqrt(ops.sum(ops.square(g)) + 1e-12)
    return ops.reshape(10.0 * ops.square(norm - 1.0), (1,))


def op_cases() -> dict[str, tuple[Callable, Callable]]:
    """name -> (function of tensors, sampler of input arrays)."""
    cases = {
        "add": (lambda t: t[0] + t[1], lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
        "mul": (lambda t: t[0] * t[1], lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
        "div": (lambda t: t[0] / t[1], lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2, size=(3, 4))]),
        "power": (lambda t: t[0] ** 3, lambda r: [r.normal(size=(5,))]),
        "exp_log": (lambda t: ops.log(ops.exp(t[0]) + 1.0), lambda r: [r.normal(size=(4, 3))]),
        "sum_mean": (lambda t: ops.mean(t[0], axis=1) + ops.sum(t[0], axis=(0, 1)),
                     lambda r: [r.normal(size=(3, 4, 2))]),
        "reshape_transpose": (lambda t: ops.transpose(ops.reshape(t[0], (6, 4)), (1, 0)),
                              lambda r: [r.normal(size=(2, 3, 4))]),
        "getitem_concat": (lambda t: ops.concat([t[0][:, 1:3], t[1], t[0][:, :1]], axis=1),
                           lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 2))]),
        "pad": (lambda t: ops.pad(t[0], [(1, 2), (0, 1)]), lambda r: [r.normal(size=(3, 3))]),
        "matmul": (lambda t: t[0] @ t[1], lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
        "selu": (lambda t: ops.activation(t[0], "selu"), lambda r: [_away_from_zero(r, (4, 5))]),
        "sigmoid": (lambda t: ops.activation(t[0], "sigmoid"), lambda r: [r.normal(size=(4, 5)) * 2]),
        "softplus": (lambda t: ops.softplus(t[0]), lambda r: [r.normal(size=(6,)) * 2]),
        "leaky_relu": (lambda t: ops.activation(t[0], "leaky_relu"), lambda r: [_away_from_zero(r, (4, 5))]),
        "abs": (lambda t: ops.abs(t[0]), lambda r: [_away_from_zero(r, (4, 5))]),
        "softmax": (lambda t: ops.activation(t[0], "softmax", axis=-1), lambda r: [r.normal(size=(3, 4))]),
        "clamp_min": (lambda t: ops.clamp_min(t[0], 0.0), lambda r: [_away_from_zero(r, (7,))]),
        "global_average_pool": (lambda t: ops.global_average_pool(t[0]), lambda r: [r.normal(size=(2, 3, 4, 5))]),
        "cosine_similarity": (
            lambda t: ops.sum(t[0] * t[1], axis=-1) / (ops.l2_norm(t[0])[..., 0] * ops.l2_norm(t[1])[..., 0]),
            lambda r: [r.normal(size=(3, 6)), r.normal(size=(3, 6))]),
        "conv2d_same": (lambda t: conv.conv2d(t[0], t[1], t[2]),
                        lambda r: [r.normal(size=(2, 5, 5, 2)), r.normal(size=(3, 3, 2, 3)), r.normal(size=(3,))]),
        "conv2d_stride2": (lambda t: conv.conv2d(t[0], t[1], stride=2),
                           lambda r: [r.normal(size=(1, 6, 6, 2)), r.normal(size=(3, 3, 2, 2))]),
        "conv2d_dilated": (lambda t: conv.conv2d(t[0], t[1], dilation=2),
                           lambda r: [r.normal(size=(1, 6, 5, 2)), r.normal(size=(3, 3, 2, 2))]),
        "conv2d_transpose": (lambda t: conv.conv2d_transpose(t[0], t[1], t[2]),
                             lambda r: [r.normal(size=(2, 3, 3, 2)), r.normal(size=(4, 4, 3, 2)), r.normal(size=(3,))]),
        "conv3d": (lambda t: conv.conv3d(t[0], t[1], t[2], spatial_stride=2, padding=1),
                   lambda r: [r.normal(size=(1, 3, 6, 6, 2)), r.normal(size=(2, 4, 4, 2, 2)), r.normal(size=(2,))]),
        "conv_input_grad": (lambda t: conv.conv_input_grad(t[0], t[1], (6, 6), (2, 2), (1, 1)),
                            lambda r: [r.normal(size=(1, 2, 2, 3)), r.normal(size=(3, 3, 2, 3))]),
        "conv_weight_grad": (lambda t: conv.conv_weight_grad(t[0], t[1], (3, 3), (1, 1), (2, 2)),
                             lambda r: [r.normal(size=(2, 6, 6, 2)), r.normal(size=(2, 2, 2, 3))]),
        "batch_norm": (lambda t: nn.batch_norm(t[0], t[1], t[2], None, "train"),
                       lambda r: [r.normal(size=(3, 2, 2, 3)), r.normal(size=(3,)), r.normal(size=(3,))]),
        "spectral_normalize": (lambda t: nn.spectral_normalize(t[0], np.ones(3) / np.sqrt(3), 200, update=False)[0],
                               lambda r: [r.normal(size=(2, 2, 2, 3))]),
    }
    gp_sampler = (lambda r: [r.normal(size=(1, 6, 6, 2)), r.normal(size=(4, 4, 2, 3)), r.normal(size=(3, 3, 3, 1))])
    cases["gradient_penalty_double_backward"] = (
        lambda t: _gp_loss(t, np.ones(3) / np.sqrt(3), np.ones(1)), gp_sampler)
    return cases


def run_op_suite(seed: int = 0, instances: int = 5, tolerance: float = 1e-4) -> list[CheckResult]:
    results = []
    for k, (name, (fn, sampler)) in enumerate(op_cases().items()):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(instances):
            worst = max(worst, check_function(fn, sampler(rng), rng))
        results.append(CheckResult(name, worst, instances, tolerance))
    return results


TINY_MODEL = dict(resolution=16, channel_scale=0.125, head_channels=2, dropout=0.0)


def check_model(seed: int = 0, n_params: int = 200, tolerance: float = 1e-3, step: float = STEP) -> CheckResult:
    """Finite differences on sampled weights of a 16x16 predictor scored by both critics.

    Samples whose stencil straddles a kink of a piecewise activation (the
    one-sided slopes disagree beyond ``tolerance``) are replaced by fresh
    samples and counted in ``skipped``. The scalar is a random projection of the prediction plus both critic
    means on a 2x upsampled copy. Batch normalization runs on batch statistics and spectral
    normalization keeps its vectors fixed, so the scalar is a deterministic
    function of the weights. The power iteration is first run to convergence,
    where holding its vectors constant in the backward pass is exact.
    """
    from .config import ModelConfig
    from .discriminators import video_input
    from .training import build_models

    models = build_models(ModelConfig(**TINY_MODEL), seed)
    gen, ic, vc = models.generator, models.image_critic.eval(), models.video_critic.eval()
    gen.train()
    for critic in (ic, vc):
        for conv in critic.convs + [critic.final]:
            conv.sn_u, _ = nn.power_iteration(nn._as_matrix(conv.weight.data), conv.sn_u, 1000)
    rng = np.random.default_rng([seed, 7919])
    clips = rng.uniform(0.0, 1.0, size=(2, 5, 16, 16, 4))
    probe = rng.normal(size=(2, 16, 16, 4))

    def upsample(x):
        # the critics need at least 32x32, so they see a 2x nearest-neighbour copy
        b = x.shape[:-3]
        wide = ops.broadcast_to(ops.reshape(x, b + (16, 1, 16, 1, 4)), b + (16, 2, 16, 2, 4))
        return ops.reshape(wide, b + (32, 32, 4))

    def loss():
        pred, _ = gen(clips)
        big = upsample(pred)
        return (ops.sum(pred * Tensor(probe)) + ops.mean(ic(big).score)
                + ops.mean(vc(video_input(upsample(Tensor(clips)), big)).score))

    params = [p for _, m in models.named_modules() for p in m.parameters()]
    for p in params:
        p.grad = None
    loss().backward()
    sizes = np.array([p.size for p in params])
    ends = np.cumsum(sizes)
    analytic, numeric, skipped = [], [], 0
    with autograd.no_grad():
        f = lambda: float(loss().data)
        center = f()
        for flat in rng.permutation(int(ends[-1])):
            if len(analytic) == n_params:
                break
            k = int(np.searchsorted(ends, flat, side="right"))
            p, off = params[k], int(flat - (ends[k] - sizes[k]))
            view = p.data.reshape(-1)
            orig = view[off]
            view[off] = orig + step
            hi = f()
            view[off] = orig - step
            lo = f()
            view[off] = orig
            right, left = (hi - center) / step, (center - lo) / step
            # one-sided slopes that disagree mean a SELU/leaky-ReLU kink lies inside the stencil
            if abs(right - left) > tolerance * max(abs(right), abs(left), FLOOR):
                skipped += 1
                continue
            analytic.append(0.0 if p.grad is None else p.grad.reshape(-1)[off])
            numeric.append((hi - lo) / (2 * step))
    result = CheckResult("tiny_model_end_to_end", relative_error(np.array(analytic), np.array(numeric)),
                         len(analytic), tolerance)
    result.skipped = skipped
    return result
