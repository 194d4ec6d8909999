"""Command-line interface.

Subcommands: gen-data, init-prototypes, train, eval, analyze, sweep.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .analyze import analyze_prototypes, write_analysis
from .config import RunConfig, load_config, parse_synthetic_spec
from .data import generate_synthetic, read_dataset, save_clues, save_dataset
from .errors import McclError
from .harness import (
    evaluate_checkpoint,
    init_bank,
    load_checkpoint,
    resolve_split_dir,
    train_from_dir,
)
from .prototypes import save_bank
from .sweep import parse_sweep_values, sweep

logger = logging.getLogger(__name__)


def _cmd_gen_data(args) -> int:
    spec = parse_synthetic_spec(Path(args.spec).read_text(encoding="utf-8"))
    train_ds, val_ds, test_ds, clues = generate_synthetic(spec)
    out = Path(args.out)
    for name, ds in (("train", train_ds), ("val", val_ds), ("test", test_ds)):
        save_dataset(ds, out / name)
    save_clues(clues, out / "clues.json")
    print(f"wrote {len(train_ds)}/{len(val_ds)}/{len(test_ds)} samples to {out}")
    return 0


def _cmd_init_prototypes(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    if args.k is not None:
        config.k = args.k
    config.seed = args.seed
    dataset = read_dataset(resolve_split_dir(args.data, "train"))
    bank = init_bank(config, dataset)
    save_bank(bank, args.out)
    print(f"wrote bank of {bank.total} prototypes x {len(bank.stages)} stages to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    result = train_from_dir(config, args.data, out_dir=args.out, bank_path=args.bank)
    if result.metric_log:
        _, last = result.metric_log[-1]
        print(last.as_table())
    print(f"checkpoint written to {Path(args.out) / 'checkpoint.pt'}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = read_dataset(resolve_split_dir(args.data, "test"))
    report = evaluate_checkpoint(ckpt, dataset, threshold=args.threshold)
    print(report.as_table())
    print()
    print(report.as_text(), end="")
    return 0


def _cmd_analyze(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.bank is None:
        raise McclError("checkpoint has no prototype bank to analyze")
    dataset = read_dataset(resolve_split_dir(args.data, "train"))
    result = analyze_prototypes(ckpt.bank, dataset, ckpt.config.tau, ckpt.config.batch_size)
    write_analysis(result, args.out)
    print(
        f"analysis written to {args.out}: {len(result.dead_prototypes)} dead "
        f"prototypes, owner-dominance {result.dominant_on_owner():.3f}"
    )
    return 0


def _cmd_sweep(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    values = parse_sweep_values(args.param, args.values)
    train_ds = read_dataset(resolve_split_dir(args.data, "train"))
    eval_path = resolve_split_dir(args.data, "val")
    eval_ds = read_dataset(eval_path) if eval_path else train_ds
    rows = sweep(config, train_ds, eval_ds, args.param, values, out_dir=args.out)
    from .sweep import format_table

    print(format_table(args.param, rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mccl",
        description="Compositional visual-clue learning for multi-label intent recognition",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="generator spec file (key: value)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("init-prototypes", help="build a prototype bank from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None, help="total prototype budget")
    p.add_argument("--out", required=True, help="bank file to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="optional run config for kmeans knobs")
    p.set_defaults(func=_cmd_init_prototypes)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="run config file")
    p.add_argument("--data", required=True, help="dataset root (train/ val/ test/)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--bank", default=None, help="optional pre-built prototype bank")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze", help="prototype-category correlation analysis")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("sweep", help="train+eval over a list of parameter values")
    p.add_argument("--config", default=None)
    p.add_argument("--param", required=True, help="k | lambda | tau | stages")
    p.add_argument("--values", required=True, help="comma list (';' between stage lists)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except McclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)


if __name__ == "__main__":
    sys.exit(main())
