"""Prediction error, regularity scores, frame-level AUC and the attention perturbation probe."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .config import stream
from .data import VideoDataset, gather_windows, window_index
from .generator import CLIP_LENGTH, ConvTransformer
from .tensor.autograd import no_grad

LOG_FLOOR = 1e-12
SCORE_HEADER = ("clip", "frame", "e_mse", "e_t", "regularity", "label")


class UndefinedAUC(ValueError):
    """AUC needs both positive and negative labels."""


def prediction_error(pred, truth) -> np.ndarray | float:
    """Mean squared error over every element of a frame; batched input gives one value per frame."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if pred.ndim <= 3:
        return float(np.mean((pred - truth) ** 2))
    return np.mean((pred - truth) ** 2, axis=tuple(range(1, pred.ndim)))


def log_error(e_mse, floor: float = LOG_FLOOR):
    return np.log10(np.asarray(e_mse, dtype=np.float64) + floor)


def psnr(pred, truth, floor: float = LOG_FLOOR):
    """``10 log10(max(pred) / e_mse)`` per frame, with ``floor`` added to the error."""
    pred = np.asarray(pred, dtype=np.float64)
    e = prediction_error(pred, truth)
    peak = pred.max() if pred.ndim <= 3 else pred.reshape(len(pred), -1).max(axis=1)
    return 10.0 * np.log10(peak / (np.asarray(e) + floor))


def _normalize(e_t: np.ndarray) -> np.ndarray:
    lo, hi = e_t.min(), e_t.max()
    if hi == lo:
        warnings.warn("constant error series; regularity set to 1", RuntimeWarning, stacklevel=3)
        return np.ones_like(e_t)
    return 1.0 - (e_t - lo) / (hi - lo)


def regularity(e_t, groups=None) -> np.ndarray:
    """``1 - (e_t - min) / (max - min)``, min/max taken within each group (one group if None)."""
    e_t = np.asarray(e_t, dtype=np.float64)
    if groups is None:
        return _normalize(e_t)
    groups = np.asarray(groups)
    out = np.empty_like(e_t)
    for g in np.unique(groups):
        sel = groups == g
        out[sel] = _normalize(e_t[sel])
    return out


def auc(scores, labels, higher_is_anomalous: bool = False) -> float:
    """Frame-level ROC AUC by the rank-sum statistic with midranks for ties.

    By default ``scores`` are regularities, so low values flag anomalies
    (label 1); they are negated before ranking.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d arrays of equal length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("AUC is undefined when labels contain a single class")
    ranks = rankdata(scores if higher_is_anomalous else -scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- score series -----------------------------------------------------------
@dataclass
class ScoreSeries:
    clip: np.ndarray
    frame: np.ndarray
    e_mse: np.ndarray
    e_t: np.ndarray
    regularity: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.frame)

    def auc(self) -> float:
        return auc(self.regularity, self.label)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SCORE_HEADER)
            for row in zip(self.clip, self.frame, self.e_mse, self.e_t, self.regularity, self.label):
                w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3])),
                            repr(float(row[4])), int(row[5])])

    @classmethod
    def from_csv(cls, path) -> ScoreSeries:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != SCORE_HEADER:
                raise ValueError(f"{path}: expected header {','.join(SCORE_HEADER)}, got {','.join(header)}")
            rows = list(reader)
        cols = list(zip(*rows)) if rows else [()] * len(SCORE_HEADER)
        ints = lambda c: np.array(c, dtype=np.int64)
        flts = lambda c: np.array(c, dtype=np.float64)
        return cls(ints(cols[0]), ints(cols[1]), flts(cols[2]), flts(cols[3]), flts(cols[4]), ints(cols[5]))


def predict_windows(generator: ConvTransformer, stacked: np.ndarray, targets: np.ndarray, batch_size: int = 5):
    """Inference-mode predictions ``[n, h, w, 4]`` and stacked attention weights per window."""
    generator.eval()
    preds, weights = [], []
    with no_grad():
        for i in range(0, len(targets), batch_size):
            x, _ = gather_windows(stacked, targets[i:i + batch_size])
            pred, trace = generator(x)
            preds.append(pred.data)
            if trace.levels:
                weights.append(trace.weights())
    return np.concatenate(preds), (np.concatenate(weights, axis=1) if weights else None)


def score_dataset(generator: ConvTransformer, dataset: VideoDataset, normalization: str = "clip",
                  source: str = "mse", image_range: str = "unit", batch_size: int = 5) -> ScoreSeries:
    """Score every frame that has a full five-frame history.

    ``source='psnr'`` ranks frames by negative PSNR instead of log error.
    """
    if normalization not in ("clip", "global"):
        raise ValueError(f"normalization must be 'clip' or 'global', got {normalization!r}")
    if source not in ("mse", "psnr"):
        raise ValueError(f"source must be 'mse' or 'psnr', got {source!r}")
    targets = window_index(dataset)
    stacked = dataset.stacked(image_range)
    preds, _ = predict_windows(generator, stacked, targets, batch_size)
    truth = stacked[targets]
    e_mse = prediction_error(preds, truth)
    e_t = log_error(e_mse) if source == "mse" else -psnr(preds, truth)
    starts = np.array([a for a, _ in dataset.clips])
    clip = np.searchsorted(starts, targets, side="right") - 1
    r = regularity(e_t, clip if normalization == "clip" else None)
    return ScoreSeries(clip, targets - starts[clip], e_mse, e_t, r, dataset.labels[targets].astype(np.int64))


# -- perturbation probe -----------------------------------------------------
@dataclass
class PerturbationReport:
    """Attention weights with two memories perturbed versus the untouched control.

    Weight arrays are ``[levels, windows, heads, T-1]``; column i-1 is the
    memory i frames before the query.
    """

    levels: tuple
    noise_offset: int
    flow_offset: int
    perturbed: np.ndarray
    control: np.ndarray
    target_frames: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def slots(self) -> list[int]:
        return [self.noise_offset - 1, self.flow_offset - 1]

    def _others(self) -> list[int]:
        return [i for i in range(self.perturbed.shape[-1]) if i not in self.slots]

    def window_means(self, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-window mean weight on the perturbed slots and on the remaining slots."""
        on = weights[..., self.slots].mean(axis=(0, 2, 3))
        off = weights[..., self._others()].mean(axis=(0, 2, 3))
        return on, off

    def fraction_lower(self) -> float:
        on, off = self.window_means(self.perturbed)
        return float(np.mean(on < off))

    def control_fraction_lower(self) -> float:
        on, off = self.window_means(self.control)
        return float(np.mean(on < off))

    def paired_fraction_lower(self) -> float:
        """Windows whose perturbed slots lose weight relative to the same slots in the control."""
        on, _ = self.window_means(self.perturbed)
        ctrl, _ = self.window_means(self.control)
        return float(np.mean(on < ctrl))

    def max_row_sum_error(self) -> float:
        return float(max(np.abs(self.perturbed.sum(-1) - 1).max(), np.abs(self.control.sum(-1) - 1).max()))

    def summary(self) -> dict[str, float]:
        on, off = self.window_means(self.perturbed)
        c_on, c_off = self.window_means(self.control)
        return {
            "windows": len(self.target_frames),
            "noise_offset": self.noise_offset,
            "flow_offset": self.flow_offset,
            "mean_weight_perturbed_slots": float(on.mean()),
            "mean_weight_other_slots": float(off.mean()),
            "control_mean_weight_perturbed_slots": float(c_on.mean()),
            "control_mean_weight_other_slots": float(c_off.mean()),
            "fraction_lower": self.fraction_lower(),
            "control_fraction_lower": self.control_fraction_lower(),
            "paired_fraction_lower": self.paired_fraction_lower(),
            "max_row_sum_error": self.max_row_sum_error(),
        }

    def write(self, path) -> None:
        """Summary as key=value lines followed by per-level, per-head, per-slot mean weights."""
        lines = [f"{k}={v}" for k, v in self.summary().items()]
        for li, level in enumerate(self.levels):
            for h in range(self.perturbed.shape[2]):
                p = self.perturbed[li, :, h].mean(axis=0)
                c = self.control[li, :, h].mean(axis=0)
                lines.append(f"level{level}.head{h}.perturbed=" + ",".join(f"{x:.6f}" for x in p))
                lines.append(f"level{level}.head{h}.control=" + ",".join(f"{x:.6f}" for x in c))
        Path(path).write_text("\n".join(lines) + "\n")


def perturb_experiment(generator: ConvTransformer, dataset: VideoDataset, seed: int, n_windows: int = 100,
                       noise_std: float = 0.1, flow_scale: float = 0.9, noise_offset: int = 2,
                       flow_offset: int = 1, image_range: str = "unit", batch_size: int = 5) -> PerturbationReport:
    """Add Gaussian noise to one memory frame's image and scale another's flow; record query attention.

    Offsets count frames back from the query (the last input frame), so the
    defaults perturb the two frames immediately preceding it.
    """
    if not generator.cfg.attention:
        raise ValueError("the perturbation probe needs a model with temporal attention")
    if noise_offset == flow_offset or not (1 <= noise_offset < CLIP_LENGTH and 1 <= flow_offset < CLIP_LENGTH):
        raise ValueError(f"offsets must be distinct values in 1..{CLIP_LENGTH - 1}")
    rng = stream(seed, "perturb")
    targets = window_index(dataset)
    if len(targets) < n_windows:
        raise ValueError(f"dataset has {len(targets)} windows, fewer than the {n_windows} requested")
    chosen = np.sort(rng.choice(targets, size=n_windows, replace=False))
    stacked = dataset.stacked(image_range)
    x, _ = gather_windows(stacked, chosen)
    q = CLIP_LENGTH - 1
    xp = x.copy()
    xp[:, q - noise_offset, :, :, 0] += rng.normal(0.0, noise_std, size=xp.shape[:1] + xp.shape[2:4])
    xp[:, q - flow_offset, :, :, 1:] *= flow_scale
    generator.eval()
    out = {}
    with no_grad():
        for name, data in (("control", x), ("perturbed", xp)):
            chunks = []
            for i in range(0, n_windows, batch_size):
                _, trace = generator(data[i:i + batch_size])
                chunks.append(trace.weights())
            out[name] = np.concatenate(chunks, axis=1)
            levels = tuple(sorted(trace.levels))
    return PerturbationReport(levels, noise_offset, flow_offset, out["perturbed"], out["control"], chosen)
