"""Command-line entry point: generate, train, evaluate, predict, visualize.

Exit codes: 0 ok, 2 configuration error, 3 input/output error, 4 non-finite
numerics during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import engine as E
from .dataset import FormatError, load_dataset, read_sample, write_dataset
from .graph import KINDS
from .synth import GenConfig, GenOverflow

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


def _category(value: str):
    if value == "mixed":
        return value
    if value in ("1", "2", "3", "4"):
        return int(value)
    raise argparse.ArgumentTypeError(f"invalid category {value!r} (choose 1, 2, 3, 4 or mixed)")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at byte {e.pos}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _merge(file_values: dict, flags: dict) -> dict:
    """Flags given on the command line override the config file."""
    out = dict(file_values)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".pgm") else p


def _summary(prefix: str, per_cat: dict) -> str:
    parts = " ".join(f"cat{c}={per_cat[c]}" for c in sorted(per_cat, key=int))
    return f"{prefix}: {parts}"


# -- subcommands -----------------------------------------------------------------------


def cmd_generate(args) -> int:
    values = _merge(_load_config(args.config), {"seed": args.seed})
    try:
        cfg = GenConfig.from_dict(values)
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    try:
        counts = write_dataset(args.out, args.count, args.category, cfg)
    except GenOverflow as e:
        raise ConfigError(f"layout does not fit: {e}") from None
    print(_summary(f"generated {args.count} samples in {args.out}", {c: counts[c] for c in counts}))
    return EXIT_OK


def _eval_summary(report: dict) -> dict:
    o = report["overall"]
    return {"perfect_matching": o["perfect_matching"], **{k: [o[k]["tpr"], o[k]["fpr"]] for k in KINDS}}


def cmd_train(args) -> int:
    from .evaluate import evaluate_samples
    from .trainer import TrainConfig, train

    flags = {
        "data": args.data, "out": args.out, "model": args.model, "steps": args.steps,
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr, "s": args.s,
        "seed": args.seed, "eval_every": args.eval_every, "dtype": args.dtype,
        "lr_schedule": args.lr_schedule, "weight_decay": args.weight_decay,
    }
    try:
        cfg = TrainConfig.from_dict(_merge(_load_config(args.config), flags))
        cfg.validate()
        cfg.build_model_config()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if not cfg.data or not cfg.out:
        raise ConfigError("train needs --data and --out")
    samples = [s for _, s in load_dataset(cfg.data)]
    held = samples[: cfg.eval_limit]

    def eval_fn(model):
        summary = _eval_summary(evaluate_samples(held, model))
        print(f"eval (train subset, {len(held)} tables): {json.dumps(summary)}", flush=True)
        return summary

    ckpt, runlog, _ = train(cfg, samples=samples, resume=args.resume, eval_fn=eval_fn,
                            timestamps=not args.no_timestamps)
    last = runlog.records[-1]["total"] if runlog.records else float("nan")
    print(f"trained {len(runlog.records)} steps; final loss {last:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import evaluate, format_tables, report_csv, report_json

    if not args.oracle and not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint unless --oracle is given")
    try:
        report = evaluate(args.checkpoint, args.data, oracle=args.oracle, averaging=args.averaging,
                          symmetrize=args.symmetrize, max_cliques=args.max_cliques)
    except ValueError as e:
        if isinstance(e, (FormatError, E.CheckpointError, E.ShapeMismatch)):
            raise
        raise ConfigError(str(e)) from None
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report_json(report))
    if args.csv:
        Path(args.csv).write_text(report_csv(report))
    sys.stdout.write(format_tables(report))
    print(_summary("samples per category", {c: b["samples"] for c, b in report["categories"].items()}))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .evaluate import cliques_for, predict_triple
    from .model import load_model

    sample = read_sample(_stem(args.sample))
    model, _ = load_model(args.checkpoint)
    triple = predict_triple(model, sample, args.symmetrize)
    out = {k: [list(c) for c in cliques_for(k, triple[k], args.max_cliques).cliques] for k in KINDS}
    text = json.dumps(out, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .evaluate import predict_triple
    from .visualize import distinct_colors, visualize

    sample = read_sample(_stem(args.sample))
    triple = None
    if args.checkpoint:
        from .model import load_model

        triple = predict_triple(load_model(args.checkpoint)[0], sample)
    assignment = visualize(sample, args.out, triple)
    counts = {k: len(distinct_colors(assignment[k])) for k in KINDS}
    print("wrote " + " ".join(f"{args.out}_{k}.png ({counts[k]} colours)" for k in KINDS))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tablegraph", description="Graph-based table structure recognition.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--category", type=_category, default="mixed", help="1, 2, 3, 4 or mixed")
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="JSON file of generator settings")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--model", choices=["fcnn", "dgcnn", "gravnet"])
    t.add_argument("--steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-schedule", choices=["constant", "cosine"])
    t.add_argument("--weight-decay", type=float, help="decoupled weight decay, scaled by the learning rate")
    t.add_argument("--s", type=int, help="pairs sampled per vertex and relation")
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--dtype", choices=["float32", "float64"])
    t.add_argument("--config", help="JSON file of training settings")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-timestamps", action="store_true", help="omit wall-clock times from the run log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint (or the oracle) on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--csv", help="optional CSV path")
    e.add_argument("--oracle", action="store_true", help="decode ground truth instead of a model")
    e.add_argument("--averaging", choices=["macro", "micro"], default="macro")
    e.add_argument("--symmetrize", choices=["or", "and", "mean"], default="or")
    e.add_argument("--max-cliques", type=int)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("predict", help="predict cliques for one sample")
    r.add_argument("--sample", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out")
    r.add_argument("--symmetrize", choices=["or", "and", "mean"], default="or")
    r.add_argument("--max-cliques", type=int)
    r.set_defaults(func=cmd_predict)

    v = sub.add_parser("visualize", help="write cell/row/column overlays for one sample")
    v.add_argument("--sample", required=True)
    v.add_argument("--checkpoint", help="model checkpoint; ground truth when omitted")
    v.add_argument("--out", required=True, help="output prefix")
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except E.NonFinite as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (E.CheckpointError, E.ShapeMismatch) as e:
        print(f"io error: incompatible checkpoint: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
