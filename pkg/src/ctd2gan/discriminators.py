"""PatchGAN critics with spectral normalization on every convolution.

Four 4x4 convolutions (strides 2, 2, 2, 1; leaky ReLU 0.2) followed by a
stride-1 convolution to a single channel, all padded by one pixel. The video
critic uses the same schedule with a temporal kernel of 2 and stride 1, so six
stacked frames shrink to 5, 4, 3, 2 before the leftover axis is averaged.
Outputs are raw (no sigmoid), as the Wasserstein objective needs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .generator import CHANNELS, CLIP_LENGTH
from .tensor import ops
from .tensor.autograd import Tensor, as_tensor
from .tensor.nn import Module, SNConv2d, SNConv3d

CRITIC_CHANNELS = (64, 128, 256, 512)
CRITIC_STRIDES = (2, 2, 2, 1)
MIN_EXTENT = 32


def _check_extent(h, w):
    if min(h, w) < MIN_EXTENT:
        raise ValueError(f"critics need frames of at least {MIN_EXTENT}x{MIN_EXTENT}, got {h}x{w}")


@dataclass
class CriticOutput:
    patch_map: Tensor  # [B, p_h, p_w]
    score: Tensor      # [B], mean over the patch map


def patch_extent(size: int) -> int:
    """Side of the patch map for a square input of side ``size``."""
    for stride in CRITIC_STRIDES + (1,):
        size = (size + 2 - 4) // stride + 1
    return size


def _output(y) -> CriticOutput:
    patch = ops.reshape(y, y.shape[:-1])
    return CriticOutput(patch, ops.mean(patch, axis=(1, 2)))


class ImageCritic(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        ch = [CHANNELS] + [cfg.channels(c) for c in CRITIC_CHANNELS]
        self.convs = [SNConv2d(ch[i], ch[i + 1], rng, stride=s) for i, s in enumerate(CRITIC_STRIDES)]
        self.final = SNConv2d(ch[-1], 1, rng, stride=1)

    def forward(self, frames) -> CriticOutput:
        frames = as_tensor(frames)
        if frames.ndim != 4 or frames.shape[-1] != CHANNELS:
            raise ValueError(f"image critic expects [B, h, w, {CHANNELS}], got {frames.shape}")
        _check_extent(*frames.shape[1:3])
        x = frames
        for conv in self.convs:
            x = ops.leaky_relu(conv(x), 0.2)
        return _output(self.final(x))


class VideoCritic(Module):
    """Scores ``[B, 6, h, w, 4]``: the five conditioning frames plus a real or predicted one."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        ch = [CHANNELS] + [cfg.channels(c) for c in CRITIC_CHANNELS]
        self.convs = [SNConv3d(ch[i], ch[i + 1], rng, stride=s) for i, s in enumerate(CRITIC_STRIDES)]
        self.final = SNConv2d(ch[-1], 1, rng, stride=1)
        self.past_images_only = cfg.critic_past_images_only

    def forward(self, stack) -> CriticOutput:
        stack = as_tensor(stack)
        if stack.ndim != 5 or stack.shape[1] != CLIP_LENGTH + 1 or stack.shape[-1] != CHANNELS:
            raise ValueError(
                f"video critic expects [B, {CLIP_LENGTH + 1}, h, w, {CHANNELS}], got {stack.shape}"
            )
        _check_extent(*stack.shape[2:4])
        x = stack
        if self.past_images_only:
            keep = np.ones((1, CLIP_LENGTH + 1, 1, 1, CHANNELS))
            keep[:, :CLIP_LENGTH, :, :, 1:] = 0.0
            x = x * Tensor(keep)
        for conv in self.convs:
            x = ops.leaky_relu(conv(x), 0.2)
        x = ops.mean(x, axis=1)
        return _output(self.final(x))


def video_input(past, frame):
    """Stack ``past [B, 5, h, w, 4]`` with ``frame [B, h, w, 4]`` along time."""
    frame = as_tensor(frame)
    return ops.concat([as_tensor(past), ops.reshape(frame, (frame.shape[0], 1) + frame.shape[1:])], axis=1)
