"""Command-line entry point.

    cmsf run --config exp.json [--seed N] [--out DIR]
    cmsf compare metrics1.csv metrics2.csv ... [--out DIR]
    cmsf purity --checkpoint run.ckpt --dataset data.csv --k K [--out DIR]

Exit codes: 2 for config validation failures, 3 for numeric failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen, evaluate, plots, runner
from .encoder import load_checkpoint
from .membank import BankEntry, MemoryBank
from .numkit import NumericError
from .runner import ConfigError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _cmd_run(args) -> int:
    try:
        config = runner.load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        config = replace(config, seed=args.seed, seeds=[args.seed])
    out_dir = args.out if args.out is not None else config.out_dir
    try:
        metrics_path = runner.run_experiment(config, out_dir)
    except NumericError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"metrics written to {metrics_path}")
    return 0


def _cmd_compare(args) -> int:
    try:
        report = runner.compare(args.paths, out_dir=args.out)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(report, end="")
    return 0


def _cmd_purity(args) -> int:
    pair = load_checkpoint(args.checkpoint)
    ds = datagen.load_csv(args.dataset)
    embeds = evaluate.embed_dataset(pair, ds)
    bank = MemoryBank(capacity=len(ds))
    bank.push([BankEntry(embedding=embeds[i],
                         label=int(ds.train_labels[i]),
                         sample_id=int(ds.sample_ids[i]),
                         true_label=int(ds.true_labels[i]))
               for i in range(len(ds))])
    report = evaluate.purity_report(bank, embeds, ds, args.k)
    print("group,queries,mean_topk,mean_random,gap")
    for row in report:
        print(f"{row.group},{row.queries},{row.mean_topk:.6f},"
              f"{row.mean_random:.6f},{row.gap:.6f}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "purity.csv", "w") as fh:
            fh.write("group,queries,mean_topk,mean_random,gap\n")
            for row in report:
                fh.write(f"{row.group},{row.queries},{row.mean_topk!r},"
                         f"{row.mean_random!r},{row.gap!r}\n")
        plots.plot_purity(report, out / "purity.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmsf",
                                description="Constrained mean-shift "
                                            "representation learning")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None)
    run.set_defaults(func=_cmd_run)

    cmp_ = sub.add_parser("compare", help="join metrics files into a report")
    cmp_.add_argument("paths", nargs="+")
    cmp_.add_argument("--out", default=None)
    cmp_.set_defaults(func=_cmd_compare)

    pur = sub.add_parser("purity", help="top-k vs random-k purity report")
    pur.add_argument("--checkpoint", required=True)
    pur.add_argument("--dataset", required=True)
    pur.add_argument("--k", type=int, default=10)
    pur.add_argument("--out", default=None)
    pur.set_defaults(func=_cmd_purity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
