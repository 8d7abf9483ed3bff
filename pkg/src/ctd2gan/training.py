"""Adversarial training: WGAN-GP critics against the predictor, plus an L1 term."""
from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, ModelConfig, TrainConfig, from_keyvalue, to_keyvalue, stream
from .data import WINDOW, VideoDataset, gather_windows, window_index
from .discriminators import ImageCritic, VideoCritic, video_input
from .generator import ConvTransformer
from .tensor import checkpoint, ops
from .tensor.autograd import Tensor, grad, no_grad
from .tensor.optim import Adam

GP_LAMBDA = 10.0
LOSS_HEADER = ("step", "epoch", "cv_loss", "ci_loss", "gp_v", "gp_i", "g_adv", "l1")


class TrainingDivergence(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class LossReport:
    step: int = 0
    epoch: int = 0
    critic_video_loss: float | None = None
    critic_image_loss: float | None = None
    gp_video: float | None = None
    gp_image: float | None = None
    generator_adv_loss: float | None = None
    l1_loss: float | None = None

    def row(self) -> list[str]:
        vals = (self.critic_video_loss, self.critic_image_loss, self.gp_video, self.gp_image,
                self.generator_adv_loss, self.l1_loss)
        return [str(self.step), str(self.epoch)] + ["" if v is None else repr(float(v)) for v in vals]

    def values(self) -> dict[str, float]:
        return {k: v for k, v in vars(self).items() if v is not None and k not in ("step", "epoch")}


@dataclass
class Penalty:
    value: Tensor
    interpolates: np.ndarray
    epsilon: np.ndarray
    grad_norm: np.ndarray


def _per_sample_eps(epsilon, ndim):
    return epsilon.reshape((-1,) + (1,) * (ndim - 1))


def gradient_penalty(critic: Callable[[Tensor], Tensor], real, fake, lam: float = GP_LAMBDA,
                     rng: np.random.Generator | None = None, epsilon=None) -> Penalty:
    """``lam * mean_b (||dD/dx (x_b)|| - 1)^2`` at random points on the real-fake segments.

    ``critic`` maps a batch to per-sample scores ``[B]``. The norm runs over
    every element of a sample. The result stays differentiable with respect
    to the critic's parameters.
    """
    real = np.asarray(real.data if isinstance(real, Tensor) else real, dtype=np.float64)
    fake = np.asarray(fake.data if isinstance(fake, Tensor) else fake, dtype=np.float64)
    if real.shape != fake.shape:
        raise ValueError(f"real and fake batches differ in shape: {real.shape} vs {fake.shape}")
    if epsilon is None:
        rng = rng if rng is not None else np.random.default_rng()
        epsilon = rng.uniform(0.0, 1.0, size=real.shape[0])
    epsilon = np.asarray(epsilon, dtype=np.float64)
    eps = _per_sample_eps(epsilon, real.ndim)
    # the clip only removes rounding excursions beyond the segment ends
    point = np.clip(fake + eps * (real - fake), np.minimum(real, fake), np.maximum(real, fake))
    point = Tensor(point, requires_grad=True)
    scores = critic(point)
    g = grad(ops.sum(scores), point, create_graph=True)
    if not np.all(np.isfinite(g.data)):
        raise TrainingDivergence("non-finite critic gradient at the penalty interpolates")
    sq = ops.sum(ops.square(g), axis=tuple(range(1, real.ndim)))
    # sqrt has no derivative at 0; a zero gradient contributes (0 - 1)^2 with zero slope
    live = (sq.data > 0).astype(np.float64)
    norm = ops.sqrt(sq + Tensor(1.0 - live)) * Tensor(live)
    value = lam * ops.mean(ops.square(norm - 1.0))
    return Penalty(value, point.data, epsilon, norm.data)


# -- model bundle -----------------------------------------------------------
@dataclass
class Models:
    cfg: ModelConfig
    generator: ConvTransformer
    image_critic: ImageCritic | None = None
    video_critic: VideoCritic | None = None

    def named_modules(self) -> Iterator[tuple[str, object]]:
        yield "generator", self.generator
        if self.image_critic is not None:
            yield "critic_image", self.image_critic
        if self.video_critic is not None:
            yield "critic_video", self.video_critic

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, m in self.named_modules():
            out.update(m.state_dict(prefix + "."))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, m in self.named_modules():
            m.load_state_dict(state, prefix + ".")


def build_models(cfg: ModelConfig, seed: int) -> Models:
    cfg.validate()
    w = stream(seed, "weights")
    gen = ConvTransformer(cfg, w, stream(seed, "dropout"))
    ic = ImageCritic(cfg, stream(seed, "weights.critic_image")) if cfg.image_critic else None
    vc = VideoCritic(cfg, stream(seed, "weights.critic_video")) if cfg.video_critic else None
    return Models(cfg, gen, ic, vc)


def config_path(path) -> Path:
    return Path(str(path) + ".cfg")


def save_checkpoint(path, models: Models) -> None:
    """Parameters and buffers in the CTDG container, architecture as ``<path>.cfg``."""
    checkpoint.save(path, models.state_dict())
    config_path(path).write_text(to_keyvalue(models.cfg))


def load_checkpoint(path) -> Models:
    cfg_file = config_path(path)
    if not cfg_file.exists():
        raise ConfigError(f"missing architecture file {cfg_file}")
    cfg = from_keyvalue(ModelConfig, cfg_file.read_text())
    models = build_models(cfg, 0)
    models.load_state_dict(checkpoint.load(path))
    for _, m in models.named_modules():
        m.eval()
    return models


# -- optimization steps -----------------------------------------------------
@dataclass
class Trainer:
    models: Models
    config: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        self.config.validate()
        c = self.config
        kw = dict(lr=c.lr, beta1=c.beta1, beta2=c.beta2)
        self.g_opt = Adam(self.models.generator.parameters(), **kw)
        self.critic_opts = {name: Adam(m.parameters(), **kw)
                            for name, m in self.models.named_modules() if name != "generator"}
        self.penalty_rng = stream(self.seed, "penalty")

    def _zero_all(self):
        for _, m in self.models.named_modules():
            m.zero_grad()

    @staticmethod
    def _check_batch(inputs, target):
        if len(inputs) < 1:
            raise ValueError("a training batch needs at least one window")
        if len(inputs) != len(target):
            raise ValueError(f"{len(inputs)} input clips but {len(target)} targets")

    def critic_step(self, inputs: np.ndarray, target: np.ndarray) -> tuple[LossReport, float]:
        """One update of every enabled critic against a fresh, detached prediction."""
        self._check_batch(inputs, target)
        m = self.models
        report = LossReport()
        if not self.critic_opts:
            return report, 0.0
        m.generator.train()
        with no_grad():
            fake, _ = m.generator(inputs)
        fake = fake.data
        self._zero_all()
        total = Tensor(0.0)
        if m.video_critic is not None:
            vc = m.video_critic.train()
            w = ops.mean(vc(video_input(inputs, fake)).score) - ops.mean(vc(video_input(inputs, target)).score)
            pen = gradient_penalty(lambda f: vc(video_input(inputs, f)).score, target, fake,
                                   self.config.gp_lambda, self.penalty_rng)
            total = total + w + pen.value
            report.critic_video_loss, report.gp_video = float(w.data), float(pen.value.data)
        if m.image_critic is not None:
            ic = m.image_critic.train()
            w = ops.mean(ic(fake).score) - ops.mean(ic(target).score)
            pen = gradient_penalty(lambda f: ic(f).score, target, fake, self.config.gp_lambda, self.penalty_rng)
            total = total + w + pen.value
            report.critic_image_loss, report.gp_image = float(w.data), float(pen.value.data)
        self._finite(report, "critic")
        total.backward()
        for opt in self.critic_opts.values():
            opt.step()
        self._zero_all()
        return report, float(total.data)

    def generator_step(self, inputs: np.ndarray, target: np.ndarray) -> tuple[LossReport, float]:
        """One generator update; critics score in inference mode and are left untouched."""
        self._check_batch(inputs, target)
        m = self.models
        report = LossReport()
        m.generator.train()
        self._zero_all()
        pred, _ = m.generator(inputs)
        l1 = ops.mean(ops.abs(pred - Tensor(target)))
        adv = Tensor(0.0)
        critics = False
        if m.video_critic is not None:
            adv = adv - ops.mean(m.video_critic.eval()(video_input(inputs, pred)).score)
            critics = True
        if m.image_critic is not None:
            adv = adv - ops.mean(m.image_critic.eval()(pred).score)
            critics = True
        report.l1_loss = float(l1.data)
        if critics:
            report.generator_adv_loss = float(adv.data)
        self._finite(report, "generator")
        total = adv + l1
        total.backward()
        self.g_opt.step()
        self._zero_all()
        return report, float(total.data)

    @staticmethod
    def _finite(report: LossReport, phase: str):
        bad = {k: v for k, v in report.values().items() if not math.isfinite(v)}
        if bad:
            raise TrainingDivergence(f"non-finite {phase} loss components: {bad}")


# -- loop -------------------------------------------------------------------
def _merge(critic_reports: list[LossReport], gen: LossReport, step: int, epoch: int) -> LossReport:
    out = LossReport(step=step, epoch=epoch, generator_adv_loss=gen.generator_adv_loss, l1_loss=gen.l1_loss)
    for name in ("critic_video_loss", "critic_image_loss", "gp_video", "gp_image"):
        vals = [getattr(r, name) for r in critic_reports if getattr(r, name) is not None]
        if vals:
            setattr(out, name, float(np.mean(vals)))
    return out


def batches(n_windows: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled window indices cut into batches; every window appears once per epoch."""
    order = rng.permutation(n_windows)
    return [order[i:i + batch_size] for i in range(0, n_windows, batch_size)]


def train(dataset: VideoDataset, model_cfg: ModelConfig, config: TrainConfig, *,
          models: Models | None = None, checkpoint_path=None, log_path=None,
          image_range: str = "unit", on_step: Callable[[LossReport], None] | None = None):
    """Fit predictor and critics; returns (models, list of per-step LossReports).

    Writes the loss CSV as it goes and a checkpoint every ``checkpoint_every``
    steps (and at the end) when paths are given.
    """
    config.validate()
    model_cfg.validate()
    if dataset.extent != (model_cfg.resolution, model_cfg.resolution):
        raise ConfigError(f"dataset frames are {dataset.extent[0]}x{dataset.extent[1]} but the model "
                          f"expects {model_cfg.resolution}x{model_cfg.resolution}")
    targets = window_index(dataset)
    if len(targets) == 0:
        raise ValueError(f"dataset has no clip with at least {WINDOW} frames")
    seed = config.seed
    if models is None:
        models = build_models(model_cfg, seed)
    trainer = Trainer(models, config, seed)
    stacked = dataset.stacked(image_range)
    shuffle = stream(seed, "shuffle")
    reports: list[LossReport] = []
    limit = threadpool_limits(1) if config.deterministic else contextlib.nullcontext()
    log_file = open(log_path, "w", newline="") if log_path is not None else None
    try:
        writer = csv.writer(log_file) if log_file else None
        if writer:
            writer.writerow(LOSS_HEADER)
        step = 0
        with limit:
            for epoch in range(1, config.epochs + 1):
                for idx in batches(len(targets), config.batch_size, shuffle):
                    if config.max_steps and step >= config.max_steps:
                        break
                    x, y = gather_windows(stacked, targets[idx])
                    crit = [trainer.critic_step(x, y)[0] for _ in range(config.n_critic)]
                    gen, _ = trainer.generator_step(x, y)
                    step += 1
                    rep = _merge(crit, gen, step, epoch)
                    reports.append(rep)
                    if writer:
                        writer.writerow(rep.row())
                        log_file.flush()
                    if on_step:
                        on_step(rep)
                    if checkpoint_path and config.checkpoint_every and step % config.checkpoint_every == 0:
                        save_checkpoint(checkpoint_path, models)
        for _, m in models.named_modules():
            m.eval()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, models)
    finally:
        if log_file:
            log_file.close()
    return models, reports


def read_loss_log(path) -> list[dict[str, float | None]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in rows]
