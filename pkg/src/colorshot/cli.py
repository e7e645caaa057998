"""Command-line frontend.

Subcommands:

  train          train a learner on a folder dataset or synthetic tasks
  eval           evaluate a checkpoint, print "mean ± ci" accuracy
  distill        train an attention-free student against a frozen teacher
  plot           render accuracy/loss curves from metrics JSONL files
  convert-check  run the color conversion self-checks

Every run writes a manifest JSON (resolved configuration, input paths,
seed, tool version) next to its outputs; re-running from the same
manifest settings reproduces the run in deterministic mode.  Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, color_shunt, engine
from .color_shunt import ColorSpace
from .echelon import EchelonConfig
from .episodes import DatasetSource, EpisodeSpec, SyntheticSource, load_dataset
from .errors import ColorshotError
from .learner import LearnerConfig


def _add_episode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ways", type=int, default=5, help="classes per episode (K)")
    p.add_argument("--shots", type=int, default=1, help="support samples per class (N)")
    p.add_argument("--queries", type=int, default=15, help="query instances per class (Q)")
    p.add_argument("--image-size", type=int, default=84, help="square image side length")


def _add_source_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", type=Path, default=None,
                   help="directory with one folder per class")
    p.add_argument("--synthetic", action="store_true",
                   help="use synthetic color-separable tasks instead of a dataset")
    p.add_argument("--palette-separation", type=float, default=0.3,
                   help="minimum distance between synthetic class colors")
    p.add_argument("--noise", type=float, default=0.1,
                   help="pixel noise level of synthetic images")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--color-space", default="cielab",
                   choices=[s.value for s in ColorSpace])
    p.add_argument("--stage-widths", type=int, nargs=4, default=[48, 96, 192, 384],
                   metavar=("W1", "W2", "W3", "W4"))
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--metric-hidden", type=int, default=160)
    p.add_argument("--attention-dim", type=int, default=64)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--depth", type=int, default=5, help="pattern generations (g)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch-episodes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=0,
                   help="run a mid-training evaluation every this many iterations")
    p.add_argument("--eval-episodes", type=int, default=50)
    p.add_argument("--fast", action="store_true",
                   help="relax bit-determinism for speed")


def _episode_spec(args) -> EpisodeSpec:
    return EpisodeSpec(
        ways=args.ways, shots=args.shots, queries=args.queries,
        image_size=(args.image_size, args.image_size), seed=args.seed,
    )


def _source(args, parser):
    if args.synthetic:
        return SyntheticSource(args.palette_separation, args.noise)
    if args.dataset is None:
        parser.error("either --dataset PATH or --synthetic is required")
    size = (args.image_size, args.image_size)
    return DatasetSource(load_dataset(args.dataset, image_size=size))


def _learner_config(args) -> LearnerConfig:
    return LearnerConfig(
        color_space=ColorSpace.parse(args.color_space),
        echelon=EchelonConfig(
            stage_widths=tuple(args.stage_widths),
            embed_dim=args.embed_dim,
            attention_dim=args.attention_dim,
            attention_enabled=True,
        ),
        pattern_depth=args.depth,
        metric_hidden=args.metric_hidden,
    )


def _train_config(args) -> engine.TrainConfig:
    return engine.TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay,
        iterations=args.iters, batch_episodes=args.batch_episodes,
        seed=args.seed, pattern_depth=args.depth,
        eval_every=args.eval_every, eval_episodes=args.eval_episodes,
        deterministic=not args.fast,
    )


def _write_manifest(out_dir: Path, command: str, args, extras: dict) -> None:
    payload = {
        "tool_version": __version__,
        "command": command,
        "arguments": {
            k: (str(v) if isinstance(v, Path) else v)
            for k, v in vars(args).items() if k != "func"
        },
    }
    payload.update(extras)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_train(args, parser) -> int:
    source = _source(args, parser)
    spec = _episode_spec(args)
    learner_config = _learner_config(args)
    train_config = _train_config(args)
    out = Path(args.out)
    _write_manifest(out, "train", args, {
        "learner_config": learner_config.to_dict(),
        "train_config": train_config.to_dict(),
        "episode_spec": spec.to_dict(),
    })
    checkpoint, _ = engine.train(
        learner_config, spec, source, train_config, metrics_path=out / "metrics.jsonl"
    )
    engine.save_checkpoint(checkpoint, out / "model.ckpt")
    print(f"checkpoint: {out / 'model.ckpt'}")
    print(f"metrics:    {out / 'metrics.jsonl'}")
    return 0


def cmd_eval(args, parser) -> int:
    source = _source(args, parser)
    spec = _episode_spec(args)
    report = engine.evaluate(
        args.checkpoint, source, spec, num_episodes=args.episodes, seed=args.seed
    )
    print(f"{report.mean_accuracy * 100:.2f} ± {report.ci95_halfwidth * 100:.2f} "
          f"({report.episodes_evaluated} episodes)")
    if args.out is not None:
        out = Path(args.out)
        _write_manifest(out, "eval", args, {"episode_spec": spec.to_dict()})
        (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return 0


def cmd_distill(args, parser) -> int:
    source = _source(args, parser)
    spec = _episode_spec(args)
    train_config = _train_config(args)
    out = Path(args.out)
    _write_manifest(out, "distill", args, {
        "train_config": train_config.to_dict(),
        "episode_spec": spec.to_dict(),
        "gamma": args.gamma,
    })
    checkpoint, _ = engine.distill(
        args.teacher, spec, source, train_config, gamma=args.gamma,
        metrics_path=out / "metrics.jsonl",
    )
    engine.save_checkpoint(checkpoint, out / "student.ckpt")
    print(f"student checkpoint: {out / 'student.ckpt'}")
    print(f"metrics:            {out / 'metrics.jsonl'}")
    return 0


def cmd_plot(args, parser) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = []
    for path in args.metrics:
        records = engine.parse_metrics(path)
        if not records:
            raise ColorshotError(f"metrics file is empty: {path}")
        runs.append((Path(path).stem, records))
    labels = args.labels if args.labels else [name for name, _ in runs]
    if len(labels) != len(runs):
        parser.error(f"got {len(labels)} labels for {len(runs)} metrics files")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    written = []
    for kind, field, ylabel, fname in (
        ("train", "total", "training loss", "loss_vs_iteration.png"),
        ("eval", "mean_accuracy", "episode accuracy", "accuracy_vs_iteration.png"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        plotted = False
        for label, (name, records) in zip(labels, runs):
            xs = [r["iteration"] for r in records if r["kind"] == kind]
            ys = [r[field] for r in records if r["kind"] == kind]
            if xs:
                ax.plot(xs, ys, label=label)
                plotted = True
        if plotted:
            ax.set_xlabel("iteration")
            ax.set_ylabel(ylabel)
            ax.legend()
            fig.tight_layout()
            fig.savefig(out / fname, metadata={"Software": None})
            written.append(out / fname)
        plt.close(fig)
    if not written:
        raise ColorshotError("no plottable records found in the given metrics files")
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_convert_check(args, parser) -> int:
    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"{'ok  ' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1

    white = color_shunt.convert(np.array([[[255, 255, 255]]], dtype=np.uint8))[0, 0]
    black = color_shunt.convert(np.array([[[0, 0, 0]]], dtype=np.uint8))[0, 0]
    check("white -> (100, 0, 0)", bool(np.allclose(white, [100.0, 0.0, 0.0], atol=1e-12)))
    check("black -> (0, 0, 0)", bool(np.allclose(black, [0.0, 0.0, 0.0], atol=1e-12)))

    levels = np.arange(0, 256, args.stride, dtype=np.uint8)
    cube = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), axis=-1)
    cube = cube.reshape(1, -1, 3)
    back = color_shunt.invert(color_shunt.convert(cube))
    max_err = int(np.abs(back.astype(int) - cube.astype(int)).max())
    check(f"8-bit round trip (stride {args.stride}) max error {max_err} <= 1", max_err <= 1)

    for space in ColorSpace:
        converted = color_shunt.convert(cube, space)
        group = color_shunt.shunt(converted, space)
        recon = color_shunt.unshunt(group, space)
        err = float(np.abs(recon - converted).max())
        check(f"{space.value}: shunt planes reassemble (max err {err:.2e})", err < 1e-9)

    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="colorshot",
        description="Few-shot classification by color-channel perception.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a learner")
    _add_source_flags(p)
    _add_episode_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_source_flags(p)
    _add_episode_flags(p)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="optional report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("distill", help="distill a frozen teacher into a student")
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--gamma", type=float, default=1e-4, help="distillation coefficient")
    _add_source_flags(p)
    _add_episode_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("plot", help="plot curves from metrics files")
    p.add_argument("metrics", nargs="+", help="metrics JSONL files")
    p.add_argument("--labels", nargs="*", default=None, help="legend labels, one per file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("convert-check", help="run color conversion self-checks")
    p.add_argument("--stride", type=int, default=17, help="8-bit cube sampling stride")
    p.set_defaults(func=cmd_convert_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except ColorshotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
