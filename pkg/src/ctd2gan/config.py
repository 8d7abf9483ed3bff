"""Hyperparameter records and their plain-text ``key=value`` form."""
from __future__ import annotations

import dataclasses
import typing
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value or file."""


@dataclass
class ModelConfig:
    """Architecture of the generator and both critics.

    ``channel_scale`` multiplies every channel count; 1.0 gives 64-64-128-256-256 encoder
    channels and 64-128-256-512 critics. ``head_channels`` is per attention head.
    """

    resolution: int = 64
    channel_scale: float = 1.0
    n_heads: int = 8
    head_channels: int = 32
    pe_dim: int = 8
    temperature_hidden: int = 16
    dropout: float = 0.25
    decoder_kernel: int = 4
    attention: bool = True
    skip_level1: bool = False
    image_critic: bool = True
    video_critic: bool = True
    critic_past_images_only: bool = False

    def validate(self) -> None:
        if self.resolution <= 0 or self.resolution % 16:
            raise ConfigError(f"resolution must be a positive multiple of 16, got {self.resolution}")
        if self.channel_scale <= 0:
            raise ConfigError(f"channel_scale must be positive, got {self.channel_scale}")
        if self.n_heads < 1 or self.head_channels < 1:
            raise ConfigError("n_heads and head_channels must be >= 1")
        if self.pe_dim < 2 or self.pe_dim % 2:
            raise ConfigError(f"pe_dim must be a positive even number, got {self.pe_dim}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def channels(self, base: int) -> int:
        return max(1, int(round(base * self.channel_scale)))


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 5
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    n_critic: int = 1
    gp_lambda: float = 10.0
    seed: int = 0
    max_steps: int = 0
    checkpoint_every: int = 0
    deterministic: bool = True

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.n_critic < 1:
            raise ConfigError("epochs must be >= 0 and n_critic >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class SceneConfig:
    """Synthetic moving-shape scene and its anomaly schedule.

    ``anomalies`` lists the event kinds drawn for test clips: ``speed`` (a
    shape moves at ``anomaly_speed`` px/frame), ``new_object`` (a disc never
    seen in training) and ``reversal`` (a shape flips direction every frame).
    """

    height: int = 64
    width: int = 64
    clips: int = 20
    frames_per_clip: int = 100
    n_shapes: int = 3
    size_min: int = 10
    size_max: int = 14
    speed_max: int = 2
    intensity_min: float = 0.45
    intensity_max: float = 0.85
    texture_amplitude: float = 0.15
    background: float = 0.1
    anomalies: tuple = ()
    anomaly_speed: int = 6
    anomaly_min_len: int = 25
    anomaly_max_len: int = 40
    new_object_radius: float = 7.0
    new_object_intensity: float = 0.95

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigError("canvas must be at least 8x8")
        if self.size_min < 2 or self.size_max < self.size_min:
            raise ConfigError("need 2 <= size_min <= size_max")
        if self.clips < 1 or self.frames_per_clip < 1:
            raise ConfigError("clips and frames_per_clip must be >= 1")
        unknown = set(self.anomalies) - {"speed", "new_object", "reversal"}
        if unknown:
            raise ConfigError(f"unknown anomaly kinds: {sorted(unknown)}")
        if self.anomalies and self.anomaly_max_len >= self.frames_per_clip - 6:
            raise ConfigError("anomaly_max_len must leave normal frames in every clip")


def _coerce(value: str, kind):
    text = value.strip()
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind in (int, float, str):
        try:
            return kind(text)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {value!r} as {kind.__name__}") from exc
    if kind is tuple or typing.get_origin(kind) is tuple:
        return tuple(x.strip() for x in text.split(",") if x.strip())
    raise ConfigError(f"unsupported field type {kind}")


def to_keyvalue(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_keyvalue(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def update_from(cfg, values: dict[str, str], strict: bool = True):
    """Return a copy of ``cfg`` with string ``values`` coerced onto its fields."""
    hints = typing.get_type_hints(type(cfg))
    names = {f.name for f in dataclasses.fields(cfg)}
    changes = {}
    for k, v in values.items():
        if k not in names:
            if strict:
                raise ConfigError(f"unknown key {k!r} for {type(cfg).__name__}")
            continue
        changes[k] = _coerce(v, hints[k])
    return dataclasses.replace(cfg, **changes)


def from_keyvalue(cls, text: str, strict: bool = True):
    return update_from(cls(), parse_keyvalue(text), strict)


def save_config(cfg, path) -> None:
    Path(path).write_text(to_keyvalue(cfg))


def load_config(cls, path, strict: bool = True):
    return from_keyvalue(cls, Path(path).read_text(), strict)


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible random stream for a named consumer."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


PRESETS: dict[str, dict[str, SceneConfig]] = {
    "moving-squares": {
        "train": SceneConfig(clips=20, frames_per_clip=100),
        "test": SceneConfig(clips=6, frames_per_clip=100, anomalies=("speed", "new_object")),
    },
    "tiny": {
        "train": SceneConfig(height=32, width=32, clips=2, frames_per_clip=12, n_shapes=2,
                             size_min=6, size_max=8, speed_max=1),
        "test": SceneConfig(height=32, width=32, clips=2, frames_per_clip=30, n_shapes=2,
                            size_min=6, size_max=8, speed_max=1, anomalies=("speed", "new_object"),
                            anomaly_speed=4, anomaly_min_len=8, anomaly_max_len=12,
                            new_object_radius=4.0),
    },
}

# desk-scale architecture paired with each preset
MODEL_PRESETS: dict[str, ModelConfig] = {
    "moving-squares": ModelConfig(resolution=64, channel_scale=0.125, head_channels=4),
    "tiny": ModelConfig(resolution=32, channel_scale=0.125, head_channels=2),
}
