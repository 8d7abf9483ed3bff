"""Synthetic video with analytic optical flow, block-matching flow, windows and CTDS files."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import SceneConfig, stream
from .generator import CLIP_LENGTH

WINDOW = CLIP_LENGTH + 1
CTDS_MAGIC = b"CTDS"
CTDS_VERSION = 1


class DatasetFormatError(ValueError):
    """Corrupt, truncated or unsupported CTDS container."""


@dataclass(frozen=True)
class VideoDataset:
    """Frames ``[N, h, w, 1]``, flows ``[N, h, w, 3]`` (u, v, magnitude), labels ``[N]``.

    ``clips`` holds half-open ``(start, stop)`` frame ranges. Arrays are
    float32 so that the CTDS round trip is exact.
    """

    frames: np.ndarray
    flows: np.ndarray
    labels: np.ndarray
    clips: tuple = ()

    def __post_init__(self):
        n = len(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 1:
            raise ValueError(f"frames must be [N, h, w, 1], got {self.frames.shape}")
        if self.flows.shape != self.frames.shape[:3] + (3,):
            raise ValueError(f"flows must be [N, h, w, 3] matching frames, got {self.flows.shape}")
        if self.labels.shape != (n,):
            raise ValueError(f"labels must have one entry per frame, got {self.labels.shape}")
        if not self.clips:
            object.__setattr__(self, "clips", ((0, n),))
        for a in (self.frames, self.flows, self.labels):
            a.setflags(write=False)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def extent(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def stacked(self, image_range: str = "unit") -> np.ndarray:
        """``[N, h, w, 4]`` float64 image + flow channels."""
        img = self.frames.astype(np.float64)
        if image_range == "symmetric":
            img = 2.0 * img - 1.0
        elif image_range != "unit":
            raise ValueError(f"image_range must be 'unit' or 'symmetric', got {image_range!r}")
        return np.concatenate([img, self.flows.astype(np.float64)], axis=-1)

    def equals(self, other: VideoDataset) -> bool:
        return (self.clips == other.clips and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.flows, other.flows) and np.array_equal(self.labels, other.labels))


@dataclass
class InputClip:
    inputs: np.ndarray   # [5, h, w, 4]
    target: np.ndarray   # [h, w, 4]
    label: int
    clip: int
    frame: int           # target index within its clip


# -- rendering --------------------------------------------------------------
@dataclass
class Shape:
    """A textured square or disc with integer per-frame displacements.

    ``velocity[t]`` is the (dy, dx) move from frame t-1 to t; ``visible[t]``
    gates presence. Positions wrap toroidally around the canvas.
    """

    kind: str
    size: int
    y0: float
    x0: float
    velocity: np.ndarray
    texture: np.ndarray
    visible: np.ndarray = None
    positions: np.ndarray = field(init=False, default=None)

    def __post_init__(self):
        n = len(self.velocity)
        if self.visible is None:
            self.visible = np.ones(n, dtype=bool)
        steps = np.asarray(self.velocity, dtype=np.float64).copy()
        steps[0] = 0.0
        self.positions = np.array([self.y0, self.x0]) + np.cumsum(steps, axis=0)


def _interval_coverage(lo: float, size: float, n: int) -> np.ndarray:
    cells = np.arange(n, dtype=np.float64)
    cov = np.zeros(n)
    lo = lo % n
    for k in (-1, 0, 1):
        a = lo + k * n
        cov += np.clip(np.minimum(cells + 1, a + size) - np.maximum(cells, a), 0.0, 1.0)
    return np.minimum(cov, 1.0)


def _texture_index(lo: float, size: int, n: int) -> np.ndarray:
    rel = (np.arange(n) + 0.5 - lo) % n
    inside = np.floor(rel).astype(int)
    return np.where(rel < size, inside, np.where(rel < (size + n) / 2.0, size - 1, 0))


def _wrapped_offset(center: float, n: int) -> np.ndarray:
    return (np.arange(n) + 0.5 - center + n / 2.0) % n - n / 2.0


def _draw(shape: Shape, t: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """(coverage, texture values) of ``shape`` at frame ``t``."""
    y, x = shape.positions[t]
    if shape.kind == "square":
        cov = np.outer(_interval_coverage(y, shape.size, h), _interval_coverage(x, shape.size, w))
        tex = shape.texture[np.ix_(_texture_index(y, shape.size, h), _texture_index(x, shape.size, w))]
        return cov, tex
    if shape.kind == "disc":
        r = shape.size / 2.0
        dy, dx = _wrapped_offset(y + r, h), _wrapped_offset(x + r, w)
        dist = np.sqrt(dy[:, None] ** 2 + dx[None, :] ** 2)
        cov = np.clip(r - dist + 0.5, 0.0, 1.0)
        iy = np.clip(np.floor(dy + r).astype(int), 0, shape.size - 1)
        ix = np.clip(np.floor(dx + r).astype(int), 0, shape.size - 1)
        return cov, shape.texture[np.ix_(iy, ix)]
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render(shapes: list[Shape], n_frames: int, height: int, width: int, background: float):
    """Frames ``[n, h, w, 1]`` and analytic flows ``[n, h, w, 3]``.

    Later shapes occlude earlier ones. A pixel's flow is the displacement of
    the topmost shape covering at least half of it; the first frame and
    shapes absent from the previous frame contribute zero motion.
    """
    frames = np.empty((n_frames, height, width, 1))
    flows = np.zeros((n_frames, height, width, 3))
    for t in range(n_frames):
        img = np.full((height, width), background, dtype=np.float64)
        uv = np.zeros((height, width, 2))
        for s in shapes:
            if not s.visible[t]:
                continue
            cov, tex = _draw(s, t, height, width)
            img = img * (1.0 - cov) + cov * tex
            owned = cov >= 0.5
            moving = t > 0 and s.visible[t - 1]
            dy, dx = s.velocity[t] if moving else (0, 0)
            uv[owned] = (dx, dy)
        frames[t, :, :, 0] = img
        flows[t, :, :, :2] = uv
        flows[t, :, :, 2] = np.hypot(uv[..., 0], uv[..., 1])
    return frames, flows


# -- synthetic scene --------------------------------------------------------
def _normal_velocity(rng, speed_max: int) -> tuple[int, int]:
    if speed_max <= 0:
        return 0, 0
    while True:
        vy, vx = rng.integers(-speed_max, speed_max + 1, size=2)
        if 0 < vy * vy + vx * vx <= speed_max * speed_max:
            return int(vy), int(vx)


def _texture(rng, size, base, amplitude):
    return np.clip(base + amplitude * rng.uniform(-1.0, 1.0, size=(size, size)), 0.0, 1.0)


def _clip_scene(cfg: SceneConfig, rng, kind: str | None):
    n, h, w = cfg.frames_per_clip, cfg.height, cfg.width
    shapes = []
    for _ in range(cfg.n_shapes):
        size = int(rng.integers(cfg.size_min, cfg.size_max + 1))
        vel = np.tile(_normal_velocity(rng, cfg.speed_max), (n, 1))
        base = rng.uniform(cfg.intensity_min, cfg.intensity_max)
        shapes.append(Shape("square", size, rng.uniform(0, h), rng.uniform(0, w), vel,
                            _texture(rng, size, base, cfg.texture_amplitude)))
    labels = np.zeros(n, dtype=np.uint8)
    if kind is None:
        return shapes, labels
    length = int(rng.integers(cfg.anomaly_min_len, cfg.anomaly_max_len + 1))
    start = int(rng.integers(WINDOW, n - length + 1))
    stop = start + length
    labels[start:stop] = 1
    if kind == "speed":
        target = shapes[0]
        vy, vx = target.velocity[0]
        if vy == 0 and vx == 0:
            vy, vx = 0, 1
        scale = cfg.anomaly_speed / np.hypot(vy, vx)
        target.velocity[start:stop] = (int(round(vy * scale)), int(round(vx * scale)))
        shapes[0] = Shape("square", target.size, target.y0, target.x0, target.velocity, target.texture)
    elif kind == "reversal":
        target = shapes[0]
        flips = np.where((np.arange(n) - start) % 2 == 0, -1, 1)
        target.velocity[start:stop] *= flips[start:stop, None]
        shapes[0] = Shape("square", target.size, target.y0, target.x0, target.velocity, target.texture)
    elif kind == "new_object":
        size = int(round(2 * cfg.new_object_radius))
        vel = np.tile(_normal_velocity(rng, cfg.speed_max), (n, 1))
        visible = np.zeros(n, dtype=bool)
        visible[start:stop] = True
        shapes.append(Shape("disc", size, rng.uniform(0, h), rng.uniform(0, w), vel,
                            _texture(rng, size, cfg.new_object_intensity, cfg.texture_amplitude), visible))
    return shapes, labels


def synth_generate(cfg: SceneConfig, seed: int, stream_name: str = "synth") -> VideoDataset:
    """Render ``cfg.clips`` clips; test-style configs get one anomalous event per clip.

    Shapes that leave the canvas wrap around toroidally. Labels are 1 exactly
    on frames where the anomalous motion or object is present.
    """
    cfg.validate()
    rng = stream(seed, stream_name)
    frames, flows, labels, bounds = [], [], [], []
    start = 0
    for c in range(cfg.clips):
        kind = cfg.anomalies[c % len(cfg.anomalies)] if cfg.anomalies else None
        shapes, lab = _clip_scene(cfg, rng, kind)
        f, fl = render(shapes, cfg.frames_per_clip, cfg.height, cfg.width, cfg.background)
        frames.append(f)
        flows.append(fl)
        labels.append(lab)
        bounds.append((start, start + cfg.frames_per_clip))
        start += cfg.frames_per_clip
    return VideoDataset(np.concatenate(frames).astype(np.float32), np.concatenate(flows).astype(np.float32),
                        np.concatenate(labels), tuple(bounds))


# -- block matching ---------------------------------------------------------
def _search_order(radius: int):
    disp = [(u, v) for u in range(-radius, radius + 1) for v in range(-radius, radius + 1)]
    return sorted(disp, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))


def estimate_flow(prev: np.ndarray, cur: np.ndarray, block: int = 8, radius: int = 4) -> np.ndarray:
    """Exhaustive block matching (sum of absolute differences) from ``prev`` to ``cur``.

    Each block of ``cur`` takes the integer displacement (u right, v down)
    whose source block in ``prev`` matches best; the canvas wraps at the
    borders. Ties go to the smallest displacement, then lexicographic (u, v).
    Returns ``[h, w, 3]`` with u, v and magnitude.
    """
    prev, cur = np.asarray(prev, dtype=np.float64), np.asarray(cur, dtype=np.float64)
    if prev.shape != cur.shape:
        raise ValueError(f"frame extents differ: {prev.shape} vs {cur.shape}")
    p2 = prev[..., 0] if prev.ndim == 3 else prev
    c2 = cur[..., 0] if cur.ndim == 3 else cur
    h, w = c2.shape
    ys, xs = np.arange(0, h, block), np.arange(0, w, block)
    padded = np.pad(p2, radius, mode="wrap")
    best = np.full((len(ys), len(xs)), np.inf)
    best_u = np.zeros_like(best)
    best_v = np.zeros_like(best)
    for u, v in _search_order(radius):
        src = padded[radius - v:radius - v + h, radius - u:radius - u + w]
        sad = np.add.reduceat(np.add.reduceat(np.abs(c2 - src), ys, axis=0), xs, axis=1)
        better = sad < best
        best = np.where(better, sad, best)
        best_u[better] = u
        best_v[better] = v
    rows = np.minimum(np.arange(h) // block, len(ys) - 1)
    cols = np.minimum(np.arange(w) // block, len(xs) - 1)
    u_map, v_map = best_u[np.ix_(rows, cols)], best_v[np.ix_(rows, cols)]
    return np.stack([u_map, v_map, np.hypot(u_map, v_map)], axis=-1)


def flows_from_frames(frames: np.ndarray, clips, block: int = 8, radius: int = 4) -> np.ndarray:
    """Block-matching flows for every frame; the first frame of a clip gets zero flow."""
    out = np.zeros(frames.shape[:3] + (3,))
    for a, b in clips:
        for t in range(a + 1, b):
            out[t] = estimate_flow(frames[t - 1], frames[t], block, radius)
    return out


# -- windows ----------------------------------------------------------------
def assemble_windows(dataset: VideoDataset, image_range: str = "unit") -> Iterator[InputClip]:
    """Every run of six consecutive frames inside one clip: five inputs, one target."""
    stacked = dataset.stacked(image_range)
    for ci, (a, b) in enumerate(dataset.clips):
        if b - a < WINDOW:
            warnings.warn(f"clip {ci} has {b - a} frames, fewer than {WINDOW}; no windows produced",
                          stacklevel=2)
            continue
        for t in range(a + CLIP_LENGTH, b):
            yield InputClip(stacked[t - CLIP_LENGTH:t], stacked[t], int(dataset.labels[t]), ci, t - a)


def window_index(dataset: VideoDataset) -> np.ndarray:
    """Absolute target-frame indices of all windows, in clip order."""
    idx = [np.arange(a + CLIP_LENGTH, b) for a, b in dataset.clips if b - a >= WINDOW]
    return np.concatenate(idx) if idx else np.zeros(0, dtype=int)


def gather_windows(stacked: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(inputs ``[n, 5, h, w, 4]``, targets ``[n, h, w, 4]``) for absolute target indices."""
    offsets = np.arange(-CLIP_LENGTH, 0)
    return stacked[targets[:, None] + offsets[None, :]], stacked[targets]


# -- CTDS container ---------------------------------------------------------
def dumps_dataset(ds: VideoDataset) -> bytes:
    h, w = ds.extent
    parts = [CTDS_MAGIC, struct.pack("<II", CTDS_VERSION, len(ds.clips))]
    for a, b in ds.clips:
        parts.append(struct.pack("<III", b - a, h, w))
        parts.append(np.ascontiguousarray(ds.frames[a:b], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(ds.flows[a:b], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(ds.labels[a:b], dtype=np.uint8).tobytes())
    return b"".join(parts)


def loads_dataset(blob: bytes) -> VideoDataset:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise DatasetFormatError(
                f"truncated CTDS file: {what} needs {n} bytes at offset {pos}, only {len(blob) - pos} left"
            )
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CTDS_MAGIC:
        raise DatasetFormatError("not a CTDS file (bad magic at offset 0)")
    version, n_clips = struct.unpack("<II", take(8, "header"))
    if version != CTDS_VERSION:
        raise DatasetFormatError(f"unsupported CTDS version {version} (this reader handles {CTDS_VERSION})")
    frames, flows, labels, bounds, start, extent = [], [], [], [], 0, None
    for c in range(n_clips):
        n, h, w = struct.unpack("<III", take(12, f"clip {c} header"))
        if extent is not None and extent != (h, w):
            raise DatasetFormatError(f"clip {c} extent {h}x{w} differs from {extent[0]}x{extent[1]}")
        extent = (h, w)
        frames.append(np.frombuffer(take(4 * n * h * w, f"clip {c} frames"), "<f4").reshape(n, h, w, 1))
        flows.append(np.frombuffer(take(12 * n * h * w, f"clip {c} flows"), "<f4").reshape(n, h, w, 3))
        labels.append(np.frombuffer(take(n, f"clip {c} labels"), np.uint8))
        bounds.append((start, start + n))
        start += n
    if pos != len(blob):
        raise DatasetFormatError(f"unexpected trailing data at offset {pos}")
    if not bounds:
        raise DatasetFormatError("CTDS file holds no clips")
    return VideoDataset(np.concatenate(frames).astype(np.float32), np.concatenate(flows).astype(np.float32),
                        np.concatenate(labels).astype(np.uint8), tuple(bounds))


def save_dataset(ds: VideoDataset, path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path) -> VideoDataset:
    return loads_dataset(Path(path).read_bytes())
