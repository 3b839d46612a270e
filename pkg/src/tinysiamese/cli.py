"""Command-line entry point: ``tinysiamese {gen,train,verify,classify,bench}``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    SamplingError,
    generate_synthetic,
    load_dataset,
    load_pair_file,
    sample_balanced_batch,
    save_dataset,
    split_per_subject,
)
from .errors import FormatError
from .evaluation import (
    bench_matching,
    bench_training,
    classify_gallery_probe,
    evaluate_scores,
    format_kv,
    format_table,
    sweep_thresholds_from_scores,
)
from .model import StaleActivationsError, init_model, load_model, save_model, score_pair
from .numerics import DimensionError
from .training import InvariantError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_manifest(out: Path, command: str, args: argparse.Namespace, inputs, artifacts, started: float):
    manifest = {
        "command": command,
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "artifacts": [str(p) for p in artifacts],
        "wall_seconds": time.perf_counter() - started,
    }
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _emit(values: dict, fmt: str, stream=None):
    stream = stream or sys.stdout
    stream.write(format_kv(values) if fmt == "kv" else format_table(values))


def _balanced_pairs(dataset, batches: int, half: int, seed: int):
    rng = np.random.default_rng(seed)
    left, right, labels = [], [], []
    for _ in range(batches):
        b = dataset.pair_batch(sample_balanced_batch(dataset, half, rng))
        left.append(b.left)
        right.append(b.right)
        labels.append(b.labels)
    return np.concatenate(left), np.concatenate(right), np.concatenate(labels)


# -- commands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    started = time.perf_counter()
    if args.subjects < 2:
        raise UsageError("--subjects must be >= 2")
    if args.samples < 2:
        raise UsageError("--samples must be >= 2")
    if not (0 <= args.noise < args.spread):
        raise UsageError("--noise must satisfy 0 <= noise < spread")
    if args.holdout and not (0 < args.holdout < args.samples):
        raise UsageError("--holdout must be between 1 and samples-1")
    ds = generate_synthetic(args.subjects, args.samples, args.dim, args.spread, args.noise, args.seed)
    artifacts = [args.out]
    if args.holdout:
        if not args.holdout_out:
            raise UsageError("--holdout requires --holdout-out")
        ds, held = split_per_subject(ds, args.samples - args.holdout)
        save_dataset(held, args.holdout_out, args.format)
        artifacts.append(args.holdout_out)
    save_dataset(ds, args.out, args.format)
    print(f"wrote {len(ds)} records (dim {ds.dim}, {len(ds.index)} subjects) to {args.out}")
    _write_manifest(Path(args.out), "gen", args, [], artifacts, started)
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.perf_counter()
    ds = load_dataset(args.train, args.format)
    if args.dim is not None and args.dim != ds.dim:
        raise DimensionError(f"--dim {args.dim} but {args.train} has dim {ds.dim}")
    val = load_dataset(args.val, args.format) if args.val else None
    if val is not None and val.dim != ds.dim:
        raise DimensionError(f"validation dim {val.dim} != training dim {ds.dim}")
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        pairs_per_epoch=args.pairs_per_epoch,
    )
    model = init_model(ds.dim, args.seed)

    def log(stats):
        print(f"epoch {stats.epoch:4d}  loss {stats.mean_loss:.6f}  {stats.seconds:.3f}s", flush=True)

    model, trace = train(model, ds, config, log=None if args.quiet else log)
    save_model(model, args.out)
    artifacts = [args.out]
    if args.trace:
        Path(args.trace).write_text(trace.to_table(timings=args.trace_timings))
        artifacts.append(args.trace)

    eval_set = val if val is not None else ds
    try:
        left, right, labels = _balanced_pairs(eval_set, args.eval_batches, config.batch_size // 2, args.seed + 1)
    except SamplingError as exc:
        print(f"no final metrics: {exc}", file=sys.stderr)
    else:
        p, _ = score_pair(model, left, right)
        report = evaluate_scores(p, labels, args.threshold)
        print(f"final metrics on {'validation' if val is not None else 'training'} pairs:")
        _emit(report.as_dict(), args.report)
    _write_manifest(Path(args.out), "train", args, [args.train] + ([args.val] if args.val else []), artifacts, started)
    return EXIT_OK


def _parse_vector(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated numbers") from None


def cmd_verify(args) -> int:
    model = load_model(args.checkpoint)
    sources = [args.left is not None, args.pairs is not None, args.data is not None]
    if sum(sources) != 1:
        raise UsageError("give exactly one of --left/--right, --pairs or --data")
    labels = None
    if args.left is not None:
        if args.right is None:
            raise UsageError("--left requires --right")
        left = _parse_vector(args.left, "--left")[None, :]
        right = _parse_vector(args.right, "--right")[None, :]
        if left.shape[1] != model.dim or right.shape[1] != model.dim:
            raise DimensionError(f"vectors have lengths {left.shape[1]}, {right.shape[1]}; checkpoint dim is {model.dim}")
    elif args.pairs is not None:
        left, right, labels = load_pair_file(args.pairs, model.dim)
    else:
        ds = load_dataset(args.data, args.format)
        if ds.dim != model.dim:
            raise DimensionError(f"{args.data} has dim {ds.dim}; checkpoint dim is {model.dim}")
        left, right, labels = _balanced_pairs(ds, args.batches, args.batch_size // 2, args.seed)

    p, _ = score_pair(model, left, right)
    p = np.atleast_1d(p)
    if labels is None or args.scores:
        for i, s in enumerate(p):
            print(f"pair {i}  p={float(s)!r}" + (f"  label={labels[i]}" if labels is not None else ""))
    if labels is not None:
        if args.sweep:
            for t, rep in sweep_thresholds_from_scores(p, labels, args.sweep):
                _emit(rep.as_dict(), args.report)
                print()
        else:
            _emit(evaluate_scores(p, labels, args.threshold).as_dict(), args.report)
    return EXIT_OK


def cmd_classify(args) -> int:
    model = load_model(args.checkpoint)
    gallery = load_dataset(args.gallery, args.format)
    probes = load_dataset(args.probe, args.format)
    rep = classify_gallery_probe(model, gallery, probes, aggregate=args.aggregate)
    if rep.missing:
        print(f"warning: {len(rep.missing)} probe(s) belong to classes absent from the gallery", file=sys.stderr)
    summary = {
        "accuracy": rep.accuracy,
        "evaluated": rep.evaluated,
        "correct": rep.correct,
        "missing": len(rep.missing),
        "macro_precision": rep.macro_precision,
        "macro_recall": rep.macro_recall,
        "macro_f1": rep.macro_f1,
        "aggregate": rep.aggregate,
    }
    _emit(summary, args.report)
    if args.report == "kv":
        for c in rep.per_class:
            print(
                f"class={c.class_id} probes={c.probes} correct={c.correct} "
                f"precision={c.precision!r} recall={c.recall!r} f1={c.f1!r}"
            )
    else:
        print("class  probes  correct  precision  recall  f1")
        for c in rep.per_class:
            print(f"{c.class_id:5d}  {c.probes:6d}  {c.correct:7d}  {c.precision:9.4f}  {c.recall:6.4f}  {c.f1:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.checkpoint:
        model = load_model(args.checkpoint)
    else:
        model = init_model(args.dim, args.seed)
    if args.data:
        ds = load_dataset(args.data, args.format)
    else:
        ds = generate_synthetic(args.subjects, args.samples, model.dim, args.spread, args.noise, args.seed)
    rep = bench_matching(model, ds, trials=args.trials, seed=args.seed)
    if args.train_epochs > 0:
        cfg = TrainConfig(batch_size=args.batch_size, lr=args.lr, seed=args.seed, pairs_per_epoch=args.pairs_per_epoch)
        rep.train10_seconds = bench_training(model, ds, cfg, repeats=args.train_repeats, epochs=args.train_epochs)
    _emit(rep.as_dict(), args.report)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tinysiamese", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common_format(p):
        p.add_argument("--format", choices=["binary", "text"], default="binary", help="feature file format")

    def report_flag(p):
        p.add_argument("--report", choices=["table", "kv"], default="table", help="report output style")

    def synth_flags(p, dim_default=64):
        p.add_argument("--subjects", type=int, default=20)
        p.add_argument("--samples", type=int, default=6)
        p.add_argument("--dim", type=int, default=dim_default)
        p.add_argument("--spread", type=float, default=1.0)
        p.add_argument("--noise", type=float, default=0.05)

    def train_flags(p):
        p.add_argument("--batch-size", type=int, default=18)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--pairs-per-epoch", type=int, default=None)

    p = sub.add_parser("gen", help="write a synthetic feature dataset")
    synth_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=int, default=0, help="samples per subject to move into --holdout-out")
    p.add_argument("--holdout-out")
    p.add_argument("--out", required=True)
    common_format(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--train", required=True, help="training feature file")
    p.add_argument("--val", help="validation feature file for final metrics")
    p.add_argument("--dim", type=int, default=None, help="expected feature dim")
    p.add_argument("--epochs", type=int, default=120)
    train_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--eval-batches", type=int, default=50)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="loss trace output path")
    p.add_argument("--trace-timings", action="store_true", help="include per-epoch seconds in the trace file")
    p.add_argument("--quiet", action="store_true")
    common_format(p)
    report_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="score pairs with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--pairs", help="pair file")
    p.add_argument("--data", help="feature file to draw balanced pairs from")
    p.add_argument("--batches", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=18)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sweep", type=int, default=0, help="report this many evenly spaced thresholds instead")
    p.add_argument("--scores", action="store_true", help="print per-pair scores for labeled input too")
    common_format(p)
    report_flag(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("classify", help="gallery/probe classification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--aggregate", choices=["mean", "max"], default="mean")
    common_format(p)
    report_flag(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("bench", help="matching and training wall-clock timings")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    synth_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--train-epochs", type=int, default=10, help="0 skips the training timing")
    p.add_argument("--train-repeats", type=int, default=1)
    train_flags(p)
    common_format(p)
    report_flag(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tinysiamese {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, StaleActivationsError) as exc:
        print(f"tinysiamese {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (FormatError, SamplingError, DimensionError, OSError, ValueError) as exc:
        print(f"tinysiamese {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
