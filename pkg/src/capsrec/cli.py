"""Command-line entry point.

One dispatcher, subcommand per task. Exit codes: 0 success, 1
configuration problems (bad flags, bad config files, missing inputs), 2
runtime or numerical failures. Progress goes to stderr; machine-readable
results go only to files, written atomically.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .checks import CHECK_THRESHOLD, run_gradient_checks
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticSpec, build_samples, generate_synthetic, ingest_amazon
from .errors import CapsrecError, ConfigError
from .evaluation import DEFAULT_SEEDS, delta_sweep, evaluate_auc, length_ablation
from .fileio import read_kv_config, write_json
from .rng import Rng
from .training import TrainConfig, train


def _progress(message: str) -> None:
    print(message, file=sys.stderr)


def _read_config(path: str) -> dict:
    try:
        return read_kv_config(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc


def _load_dataset(path: str) -> Dataset:
    try:
        return Dataset.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc.strerror or exc}") from exc


def _parse_seeds(text: "str | None") -> tuple:
    if text is None:
        return DEFAULT_SEEDS
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --seeds value {text!r}, expected comma-separated ints") from exc


def _write_dataset(dataset: Dataset, out_dir: str) -> str:
    path = os.path.join(out_dir, "dataset.json")
    dataset.save(path)
    write_json(os.path.join(out_dir, "vocab.json"), {
        "items": dataset.items.tokens,
        "categories": dataset.categories.tokens,
        "users": dataset.users.tokens,
    })
    return path


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec.from_mapping(_read_config(args.config))
    if args.seed is not None:
        spec.seed = args.seed
    dataset = generate_synthetic(spec)
    path = _write_dataset(dataset, args.out)
    _progress(f"wrote {path}: {dataset.summary()}")
    return 0


def cmd_ingest(args) -> int:
    try:
        records, vocabs = ingest_amazon(args.reviews, args.meta, args.min_events)
    except OSError as exc:
        raise ConfigError(f"cannot read input: {exc}") from exc
    _progress(f"ingested {len(records)} events from {len(vocabs.users) - 1} users")
    dataset = build_samples(records, vocabs, args.max_len, args.neg_ratio, Rng(args.seed))
    path = _write_dataset(dataset, args.out)
    _progress(f"wrote {path}: {dataset.summary()}")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_mapping(_read_config(args.config))
    if args.seed is not None:
        config = config.copy(seed=args.seed)
    dataset = _load_dataset(args.data)
    state, opt, report = train(config, dataset, log_progress=True)
    checkpoint_path = os.path.join(args.out, "checkpoint.npz")
    save_checkpoint(checkpoint_path, state, opt, config)
    report.checkpoint_path = checkpoint_path
    payload = report.to_dict()
    payload["config"] = config.to_mapping()
    write_json(os.path.join(args.out, "report.json"), payload)
    _progress(f"final validation auc {report.final_auc():.4f}; wrote {checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    try:
        state, _, config = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    dataset = _load_dataset(args.data)
    samples = dict(dataset.splits())[args.split]
    score = evaluate_auc(state, samples)
    write_json(os.path.join(args.out, "eval.json"), {
        "auc": score,
        "split": args.split,
        "samples": len(samples),
        "checkpoint": args.checkpoint,
        "dataset": args.data,
        "model": config.base_model,
    })
    _progress(f"{args.split} auc {score:.4f}")
    return 0


def cmd_sweep_delta(args) -> int:
    config = TrainConfig.from_mapping(_read_config(args.config))
    dataset = _load_dataset(args.data)
    result = delta_sweep(config, dataset, _parse_seeds(args.seeds), out_dir=args.out,
                         progress=_progress)
    _progress(f"wrote {os.path.join(args.out, 'delta_sweep.csv')} "
              f"({len(result.points)} sweep points)")
    return 0


def cmd_ablate_length(args) -> int:
    config = TrainConfig.from_mapping(_read_config(args.config))
    dataset = _load_dataset(args.data)
    result = length_ablation(config, dataset, _parse_seeds(args.seeds), out_dir=args.out,
                             progress=_progress)
    _progress(f"wrote {os.path.join(args.out, 'length_ablation.csv')} "
              f"({len(result.cells)} cells)")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_checks(args.epsilon, progress=_progress)
    worst = max(results, key=lambda r: r.max_rel_error)
    _progress(f"worst: {worst.name} at {worst.max_rel_error:.3e} "
              f"(threshold {CHECK_THRESHOLD:.0e})")
    return 0 if all(r.ok for r in results) else 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; remap to ConfigError."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capsrec",
                     description="CTR models with an interest-capsule auxiliary task")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic planted-interest dataset")
    p.add_argument("--config", required=True, help="synthetic spec, key = value lines")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the generator config's seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="build a dataset from Amazon-style review JSON")
    p.add_argument("--reviews", required=True, help="line-delimited review JSON")
    p.add_argument("--meta", default=None, help="line-delimited item metadata JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--neg-ratio", type=int, default=1)
    p.add_argument("--min-events", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset cache from gen-data/ingest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-delta", help="train at delta 0.1..1.0 x seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated, default 0,1,2,3,4")
    p.set_defaults(func=cmd_sweep_delta)

    p = sub.add_parser("ablate-length", help="base model with/without the interest task "
                                             "at sequence caps 10/20/50")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None)
    p.set_defaults(func=cmd_ablate_length)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CapsrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
