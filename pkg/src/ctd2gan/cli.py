"""Command-line entry point: synth, train, score, eval, perturb, gradcheck.

Exit status 0 on success, 1 for invalid input or configuration, 2 for
runtime or numeric failures (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import (
    MODEL_PRESETS, PRESETS, ConfigError, ModelConfig, SceneConfig, TrainConfig, parse_keyvalue, update_from,
)
from .data import DatasetFormatError, load_dataset, save_dataset, synth_generate
from .scoring import ScoreSeries, UndefinedAUC, auc, perturb_experiment, score_dataset
from .tensor.checkpoint import CheckpointError
from .training import TrainingDivergence, load_checkpoint, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="moving-squares",
                   help="architecture preset")
    g.add_argument("--model-config", type=Path, default=None,
                   help="key=value file overriding preset architecture fields")
    g.add_argument("--resolution", type=int, default=None,
                   help="frame side, a multiple of 16; None takes the preset value")
    g.add_argument("--channel-scale", type=float, default=None,
                   help="multiplier on every channel count, 1.0 is full width; None takes the preset value")
    g.add_argument("--head-channels", type=int, default=None, help="channels per attention head; None takes the preset value")
    g.add_argument("--no-image-critic", action="store_true", help="train without the image critic")
    g.add_argument("--no-video-critic", action="store_true", help="train without the video critic")
    g.add_argument("--unet-skip-only", action="store_true",
                   help="bypass temporal attention; skips carry the current frame only")
    g.add_argument("--critic-past-images-only", action="store_true",
                   help="video critic ignores flow channels of the five past frames")


def _model_config(args) -> ModelConfig:
    cfg = MODEL_PRESETS[args.preset]
    if args.model_config is not None:
        cfg = update_from(cfg, parse_keyvalue(args.model_config.read_text()))
    changes = {}
    if args.resolution is not None:
        changes["resolution"] = str(args.resolution)
    if args.channel_scale is not None:
        changes["channel_scale"] = str(args.channel_scale)
    if args.head_channels is not None:
        changes["head_channels"] = str(args.head_channels)
    for flag, field in (("no_image_critic", "image_critic"), ("no_video_critic", "video_critic"),
                        ("unet_skip_only", "attention")):
        if getattr(args, flag):
            changes[field] = "false"
    if args.critic_past_images_only:
        changes["critic_past_images_only"] = "true"
    cfg = update_from(cfg, changes)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctd2gan", description=__doc__.splitlines()[0],
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help):
        return sub.add_parser(name, help=help, formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = command("synth", "render a synthetic dataset to a CTDS file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="moving-squares", help="scene preset")
    p.add_argument("--split", choices=("train", "test"), default="train",
                   help="train clips are normal only; test clips carry anomalies")
    p.add_argument("--scene-config", type=Path, default=None, help="key=value file overriding scene fields")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", type=Path, required=True, help="output .ctds path")

    p = command("train", "train predictor and critics")
    p.add_argument("--data", type=Path, required=True, help="training CTDS file (normal video)")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path; architecture goes to <out>.cfg")
    p.add_argument("--log", type=Path, default=None, help="loss CSV path; None writes <out>.loss.csv")
    p.add_argument("--epochs", type=int, default=3, help="passes over all training windows")
    p.add_argument("--batch-size", type=int, default=5, help="windows per step")
    p.add_argument("--lr", type=float, default=0.0002, help="Adam learning rate")
    p.add_argument("--n-critic", type=int, default=1, help="critic updates per generator update")
    p.add_argument("--gp-lambda", type=float, default=10.0, help="gradient penalty weight")
    p.add_argument("--max-steps", type=int, default=0, help="stop after this many steps; 0 means no limit")
    p.add_argument("--checkpoint-every", type=int, default=0, help="save every N steps; 0 saves only at the end")
    p.add_argument("--seed", type=int, default=0, help="seed for weights, shuffling, dropout and penalty draws")
    p.add_argument("--nondeterministic", action="store_true",
                   help="allow multithreaded BLAS (runs may then differ bitwise)")
    p.add_argument("--image-range", choices=("unit", "symmetric"), default="unit",
                   help="image channel in [0, 1] or rescaled to [-1, 1]")
    _add_model_flags(p)

    p = command("score", "write per-frame regularity scores")
    p.add_argument("--model", type=Path, required=True, help="checkpoint written by train")
    p.add_argument("--data", type=Path, required=True, help="CTDS file to score")
    p.add_argument("--out", type=Path, required=True, help="score CSV path")
    p.add_argument("--normalization", choices=("clip", "global"), default="clip",
                   help="min/max range for regularity: per clip or whole file")
    p.add_argument("--source", choices=("mse", "psnr"), default="mse",
                   help="score frames by log10 error or by negative PSNR")
    p.add_argument("--image-range", choices=("unit", "symmetric"), default="unit",
                   help="must match the value used in training")

    p = command("eval", "frame-level AUC of a score CSV")
    p.add_argument("--scores", type=Path, required=True, help="score CSV written by score")
    p.add_argument("--data", type=Path, default=None,
                   help="CTDS file whose labels replace the CSV label column; None keeps the CSV labels")
    p.add_argument("--out", type=Path, default=None, help="also write the summary as key=value to this path")

    p = command("perturb", "attention weights on perturbed memory frames")
    p.add_argument("--model", type=Path, required=True, help="checkpoint written by train")
    p.add_argument("--data", type=Path, required=True, help="CTDS file to sample windows from")
    p.add_argument("--out", type=Path, required=True, help="report path (key=value lines)")
    p.add_argument("--windows", type=int, default=100, help="number of sampled windows")
    p.add_argument("--noise-std", type=float, default=0.1, help="std of Gaussian noise added to one image")
    p.add_argument("--flow-scale", type=float, default=0.9, help="factor applied to another frame's flow")
    p.add_argument("--seed", type=int, default=0, help="seed for window choice and noise")
    p.add_argument("--image-range", choices=("unit", "symmetric"), default="unit",
                   help="must match the value used in training")

    p = command("gradcheck", "finite-difference check of every differentiable operation")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--instances", type=int, default=5, help="random inputs per operation")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error per operation")
    p.add_argument("--model-tolerance", type=float, default=1e-3, help="max relative error, tiny 16x16 model")
    p.add_argument("--model-params", type=int, default=200, help="sampled weights in the model check")
    p.add_argument("--skip-model", action="store_true", help="run the per-operation suite only")
    return parser


# -- subcommands ------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg: SceneConfig = PRESETS[args.preset][args.split]
    if args.scene_config is not None:
        cfg = update_from(cfg, parse_keyvalue(args.scene_config.read_text()))
    ds = synth_generate(cfg, args.seed, f"synth.{args.split}")
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds.clips)} clips, {ds.n_frames} frames, "
          f"{int(ds.labels.sum())} anomalous")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg = _model_config(args)
    run_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, n_critic=args.n_critic,
                          gp_lambda=args.gp_lambda, seed=args.seed, max_steps=args.max_steps,
                          checkpoint_every=args.checkpoint_every, deterministic=not args.nondeterministic)
    data = load_dataset(args.data)
    log = args.log if args.log is not None else Path(str(args.out) + ".loss.csv")
    start = time.time()
    _, reports = train(data, model_cfg, run_cfg, checkpoint_path=args.out, log_path=log,
                       image_range=args.image_range)
    last = reports[-1] if reports else None
    print(f"trained {len(reports)} steps in {time.time() - start:.0f}s; checkpoint {args.out}, log {log}")
    if last is not None:
        print("final " + " ".join(f"{k}={v:.6g}" for k, v in last.values().items()))
    return EXIT_OK


def cmd_score(args) -> int:
    models = load_checkpoint(args.model)
    series = score_dataset(models.generator, load_dataset(args.data), args.normalization, args.source,
                           args.image_range)
    series.to_csv(args.out)
    print(f"wrote {args.out}: {len(series)} scored frames")
    return EXIT_OK


def evaluation_summary(series: ScoreSeries, labels=None) -> dict[str, float]:
    labels = series.label if labels is None else labels
    return {"auc": auc(series.regularity, labels), "frames": len(series),
            "anomalous_frames": int(np.sum(labels)), "clips": len(np.unique(series.clip))}


def cmd_eval(args) -> int:
    series = ScoreSeries.from_csv(args.scores)
    labels = None
    if args.data is not None:
        ds = load_dataset(args.data)
        starts = np.array([a for a, _ in ds.clips])
        if series.clip.max(initial=-1) >= len(starts):
            raise ValueError("score CSV references clips missing from the dataset")
        labels = ds.labels[starts[series.clip] + series.frame].astype(np.int64)
    summary = evaluation_summary(series, labels)
    print(f"AUC {summary['auc']}")
    text = "".join(f"{k}={v}\n" for k, v in summary.items())
    sys.stdout.write(text)
    if args.out is not None:
        args.out.write_text(text)
    return EXIT_OK


def cmd_perturb(args) -> int:
    models = load_checkpoint(args.model)
    report = perturb_experiment(models.generator, load_dataset(args.data), args.seed, args.windows,
                                args.noise_std, args.flow_scale, image_range=args.image_range)
    report.write(args.out)
    for k, v in report.summary().items():
        print(f"{k}={v}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_op_suite(args.seed, args.instances, args.tolerance)
    if not args.skip_model:
        results.append(gradcheck.check_model(args.seed, args.model_params, args.model_tolerance))
    width = max(len(r.name) for r in results)
    for r in results:
        extra = f" skipped={r.skipped}" if r.skipped else ""
        print(f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  tol={r.tolerance:g}  "
              f"n={r.instances}{extra}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "score": cmd_score, "eval": cmd_eval,
            "perturb": cmd_perturb, "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (TrainingDivergence, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, DatasetFormatError, CheckpointError, UndefinedAUC, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
