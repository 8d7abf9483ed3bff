"""Convolutional transformer: per-frame encoder, temporal self-attention, gated skip decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ModelConfig
from .tensor import ops
from .tensor.autograd import Tensor, as_tensor
from .tensor.nn import BatchNorm, Conv2d, ConvTranspose2d, Dense, Dropout, Module

CLIP_LENGTH = 5
CHANNELS = 4
ENCODER_CHANNELS = (64, 64, 128, 256, 256)
DECODER_CHANNELS = (256, 256, 128, 64)
HEAD_FILTERS = 32
ATTENTION_LEVELS = (2, 3, 4, 5)
GATE_DILATIONS = {2: (1, 2, 4, 1), 3: (1, 2, 2, 1), 4: (1, 1, 2, 1), 5: (1, 1, 1, 1)}
NORM_FLOOR = 1e-12


def positional_encoding(p: int, dim: int = 8) -> np.ndarray:
    """Sinusoidal code: sin at even, cos at odd indices, frequency 10000^(-2i/dim)."""
    i = np.arange(dim // 2)
    angle = p / np.power(10000.0, 2 * i / dim)
    pe = np.empty(dim)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return pe


def cosine_similarity(q, m):
    """Cosine between ``q [..., d]`` and ``m [..., n, d]`` -> ``[..., n]``; norms floored at 1e-12."""
    q, m = as_tensor(q), as_tensor(m)
    q = ops.reshape(q, q.shape[:-1] + (1, q.shape[-1]))
    dots = ops.sum(q * m, axis=-1)
    norms = ops.l2_norm(q, floor=NORM_FLOOR)[..., 0] * ops.l2_norm(m, floor=NORM_FLOOR)[..., 0]
    return dots / norms


def attention_weights(query, memories, beta):
    """softmax over memories of ``beta * cos(query, memory)``.

    ``query [..., d]``, ``memories [..., n, d]``, ``beta`` broadcastable to ``[...]``.
    """
    beta = as_tensor(beta)
    if np.any(beta.data <= 0):
        raise AssertionError("temperature must be positive")
    sims = cosine_similarity(query, memories)
    if beta.ndim == sims.ndim - 1:
        beta = ops.reshape(beta, beta.shape + (1,))
    return ops.softmax(sims * beta, axis=-1)


def weighted_sum(maps, weights):
    """sum_i weights[..., i] * maps[i] for ``maps [n, ...]`` and ``weights [n]`` (no batching)."""
    maps, weights = as_tensor(maps), as_tensor(weights)
    shape = (weights.shape[0],) + (1,) * (maps.ndim - 1)
    return ops.sum(maps * ops.reshape(weights, shape), axis=0)


def gate_blend(gate, current, attended):
    """Pixel-wise convex blend: gate * current + (1 - gate) * attended."""
    gate = as_tensor(gate)
    return gate * current + (1.0 - gate) * attended


def pointwise(x, dense: Dense):
    """1x1 convolution over the channel axis of any channels-last tensor."""
    flat = ops.reshape(x, (int(np.prod(x.shape[:-1])), x.shape[-1]))
    y = dense(flat)
    return ops.reshape(y, x.shape[:-1] + (y.shape[-1],))


class EncoderBlock(Module):
    """Conv(stride)-SELU-BN[-dropout][-Conv-SELU]."""

    def __init__(self, c_in, c_out, stride, second_conv, dropout, rng, drop_rng):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, rng, kernel=3, stride=stride)
        self.bn = BatchNorm(c_out)
        self.dropout = Dropout(dropout, drop_rng) if dropout else None
        self.conv2 = Conv2d(c_out, c_out, rng, kernel=3) if second_conv else None

    def forward(self, x):
        x = self.bn(ops.selu(self.conv1(x)))
        if self.dropout is not None:
            x = self.dropout(x)
        if self.conv2 is not None:
            x = ops.selu(self.conv2(x))
        return x


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        super().__init__()
        ch = [cfg.channels(c) for c in ENCODER_CHANNELS]
        self.blocks = [
            EncoderBlock(CHANNELS, ch[0], 1, False, 0.0, rng, drop_rng),
            EncoderBlock(ch[0], ch[1], 2, True, 0.0, rng, drop_rng),
            EncoderBlock(ch[1], ch[2], 2, True, 0.0, rng, drop_rng),
            EncoderBlock(ch[2], ch[3], 2, True, cfg.dropout, rng, drop_rng),
            EncoderBlock(ch[3], ch[4], 2, True, cfg.dropout, rng, drop_rng),
        ]

    def forward(self, frames):
        """``[N, h, w, 4]`` -> list of five maps, level l at extent h / 2**(l-1)."""
        levels, x = [], frames
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return levels


class Temperature(Module):
    """beta = softplus(dense(selu(dense(query)))); starts at exactly 1."""

    def __init__(self, n_in, hidden, rng):
        super().__init__()
        self.hidden = Dense(n_in, hidden, rng)
        self.out = Dense(hidden, 1, rng, zero_weight=True)
        self.out.bias.data = np.full(1, np.log(np.expm1(1.0)))

    def forward(self, q):
        flat = ops.reshape(q, (int(np.prod(q.shape[:-1])), q.shape[-1]))
        beta = ops.softplus(self.out(ops.selu(self.hidden(flat))))
        return ops.reshape(beta, q.shape[:-1])


class SelectiveGate(Module):
    """Conv-BN-SELU x3, Conv, Conv, Sigmoid over [current; attended] maps."""

    def __init__(self, channels, dilations, rng):
        super().__init__()
        d1, d2, d3, d4 = dilations
        # batch norm follows the first three, so their biases would be dead weights
        self.convs = [
            Conv2d(2 * channels, channels, rng, dilation=d1, bias=False),
            Conv2d(channels, channels, rng, dilation=d2, bias=False),
            Conv2d(channels, channels, rng, dilation=d3, bias=False),
            Conv2d(channels, channels, rng, dilation=d4),
            Conv2d(channels, channels, rng),
        ]
        self.norms = [BatchNorm(channels) for _ in range(3)]

    def forward(self, current, attended):
        x = ops.concat([current, attended], axis=-1)
        for conv, bn in zip(self.convs[:3], self.norms):
            x = ops.selu(bn(conv(x)))
        x = self.convs[4](self.convs[3](x))
        return ops.sigmoid(x)


@dataclass
class LevelTrace:
    weights: np.ndarray      # [B, n_heads, T-1]; column i-1 is the memory at t-i
    beta: np.ndarray         # [B, n_heads]
    gate: np.ndarray | None  # [B, h, w, n_heads * head_channels]


@dataclass
class AttentionTrace:
    levels: dict[int, LevelTrace] = field(default_factory=dict)

    def weights(self) -> np.ndarray:
        """Stacked weights ``[levels, B, heads, T-1]``."""
        return np.stack([self.levels[l].weights for l in sorted(self.levels)])


class TemporalAttention(Module):
    """Multi-head temporal self-attention and selective gate for one encoder level."""

    def __init__(self, level, c_in, cfg: ModelConfig, rng):
        super().__init__()
        self.level = level
        self.n_heads, self.head_channels, self.pe_dim = cfg.n_heads, cfg.head_channels, cfg.pe_dim
        self.attend = cfg.attention
        width = cfg.n_heads * cfg.head_channels
        self.project = Dense(c_in, width, rng)
        if self.attend:
            self.temperature = Temperature(cfg.head_channels + cfg.pe_dim, cfg.temperature_hidden, rng)
            self.gate = SelectiveGate(width, GATE_DILATIONS[level], rng)
        self._pe = np.stack([positional_encoding(p, cfg.pe_dim) for p in range(CLIP_LENGTH)])

    def forward(self, feats):
        """``feats [B, T, h, w, c]`` -> (S ``[B, h, w, heads*c_h]``, LevelTrace or None)."""
        B, T, h, w, _ = feats.shape
        nh, ch = self.n_heads, self.head_channels
        proj = pointwise(feats, self.project)
        current = proj[:, T - 1]
        if not self.attend:
            return current, None
        mem_frames = [T - 1 - i for i in range(1, T)]
        heads = ops.reshape(proj, (B, T, h, w, nh, ch))
        pooled = ops.mean(heads, axis=(2, 3))                                   # [B, T, nh, ch]
        q = ops.concat([pooled[:, T - 1], Tensor(np.broadcast_to(self._pe[0], (B, nh, self.pe_dim)))], -1)
        mem_pe = np.broadcast_to(self._pe[1:T][None, None], (B, nh, T - 1, self.pe_dim))
        m = ops.concat([ops.transpose(pooled[:, mem_frames], (0, 2, 1, 3)), Tensor(mem_pe)], -1)
        beta = self.temperature(q)                                              # [B, nh]
        weights = attention_weights(q, m, beta)                                 # [B, nh, T-1]
        w_b = ops.reshape(ops.transpose(weights, (0, 2, 1)), (B, T - 1, 1, 1, nh, 1))
        attended = ops.sum(heads[:, mem_frames] * w_b, axis=1)
        attended = ops.reshape(attended, (B, h, w, nh * ch))
        gate = self.gate(current, attended)
        blended = gate_blend(gate, current, attended)
        return blended, LevelTrace(weights.data.copy(), beta.data.copy(), gate.data.copy())


class Decoder(Module):
    """Four stride-2 transposed convolutions with concatenation skips from levels 4, 3, 2."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        width = cfg.n_heads * cfg.head_channels
        dec = [cfg.channels(c) for c in DECODER_CHANNELS]
        k = cfg.decoder_kernel
        self.up = [
            ConvTranspose2d(width, dec[0], rng, k),
            ConvTranspose2d(dec[0], dec[1], rng, k),
            ConvTranspose2d(dec[1], dec[2], rng, k),
            ConvTranspose2d(dec[2], dec[3], rng, k),
        ]
        self.merge = [Conv2d(dec[i] + width, dec[i], rng) for i in range(3)]
        self.skip_level1 = cfg.skip_level1
        if cfg.skip_level1:
            self.merge.append(Conv2d(dec[3] + cfg.channels(ENCODER_CHANNELS[0]), dec[3], rng))
        self.refine = Conv2d(dec[3], cfg.channels(HEAD_FILTERS), rng)
        self.out = Conv2d(cfg.channels(HEAD_FILTERS), CHANNELS, rng, kernel=1)

    def forward(self, gated: dict[int, Tensor], level1=None):
        x = gated[5]
        for stage, skip_level in enumerate((4, 3, 2, 1)):
            x = ops.selu(self.up[stage](x))
            if skip_level > 1:
                x = ops.selu(self.merge[stage](ops.concat([x, gated[skip_level]], -1)))
            elif self.skip_level1:
                x = ops.selu(self.merge[3](ops.concat([x, level1], -1)))
        return self.out(ops.selu(self.refine(x)))


def validate_clip_shape(shape, resolution_multiple: int = 16) -> None:
    if len(shape) != 5:
        raise ValueError(f"expected clips shaped [batch, {CLIP_LENGTH}, h, w, {CHANNELS}], got {shape}")
    _, t, h, w, c = shape
    if t != CLIP_LENGTH:
        raise ValueError(f"clips must hold exactly {CLIP_LENGTH} frames, got {t}")
    if c != CHANNELS:
        raise ValueError(f"frames must have {CHANNELS} channels (image + 3 flow), got {c}")
    if h % resolution_multiple or w % resolution_multiple:
        raise ConfigError(f"frame extent {h}x{w} must be divisible by {resolution_multiple}")


class ConvTransformer(Module):
    """Predicts frame t+1 (image + flow) from the five frames ending at t."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, drop_rng: np.random.Generator | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        drop_rng = drop_rng if drop_rng is not None else np.random.default_rng(0)
        self.encoder = Encoder(cfg, rng, drop_rng)
        enc = [cfg.channels(c) for c in ENCODER_CHANNELS]
        self.attention = [TemporalAttention(l, enc[l - 1], cfg, rng) for l in ATTENTION_LEVELS]
        self.decoder = Decoder(cfg, rng)

    def encode(self, frames):
        """Feature pyramid for ``[N, h, w, 4]`` frames (or a single ``[h, w, 4]`` frame)."""
        frames = as_tensor(frames)
        single = frames.ndim == 3
        if single:
            frames = ops.reshape(frames, (1,) + frames.shape)
        h, w = frames.shape[1:3]
        if h % 16 or w % 16:
            raise ConfigError(f"frame extent {h}x{w} must be divisible by 16")
        levels = self.encoder(frames)
        return [ops.reshape(x, x.shape[1:]) for x in levels] if single else levels

    def forward(self, clips):
        """``[B, 5, h, w, 4]`` -> (prediction ``[B, h, w, 4]``, AttentionTrace)."""
        clips = as_tensor(clips)
        validate_clip_shape(clips.shape)
        B, T, h, w, c = clips.shape
        levels = self.encoder(ops.reshape(clips, (B * T, h, w, c)))
        trace = AttentionTrace()
        gated = {}
        for module in self.attention:
            f = levels[module.level - 1]
            gated[module.level], lt = module(ops.reshape(f, (B, T) + f.shape[1:]))
            if lt is not None:
                trace.levels[module.level] = lt
        level1 = None
        if self.cfg.skip_level1:
            f1 = levels[0]
            level1 = ops.reshape(f1, (B, T) + f1.shape[1:])[:, T - 1]
        return self.decoder(gated, level1), trace

    def predict_next(self, clip):
        """Single clip ``[5, h, w, 4]`` -> (``[h, w, 4]``, AttentionTrace)."""
        clip = as_tensor(clip)
        pred, trace = self(ops.reshape(clip, (1,) + clip.shape))
        return ops.reshape(pred, pred.shape[1:]), trace
