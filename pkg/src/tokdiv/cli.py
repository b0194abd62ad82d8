"""Command-line entry point.

Subcommands mirror the harness run kinds: metrics, discriminate, sparsify,
quantsearch, train, props. Exit codes: 0 ok, 1 a check or verdict failed,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import COMMANDS, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, RunConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokdiv",
        description="Token-divergence metrics and metric-guided compression "
                    "experiments on a desk-scale byte-level transformer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("metrics", "divergence report for a base model vs a compression plan"),
        ("discriminate", "lowest-magnitude vs random pruning metric comparison"),
        ("sparsify", "multi-round balanced or uniform sparsification"),
        ("quantsearch", "beam search over component quantization orderings"),
        ("train", "train a model on a byte corpus and save a checkpoint"),
        ("props", "run the executable proposition checks"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config file")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed (overrides config)")
        p.add_argument("--workers", type=int, help="worker count (overrides config)")
    return parser


def load_config(args) -> RunConfig:
    overrides = {"kind": args.command, "out_dir": args.out,
                 "seed": args.seed, "workers": args.workers}
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    clean = {k: v for k, v in overrides.items() if v is not None}
    return RunConfig(**{"out_dir": f"runs/{args.command}", **clean})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = COMMANDS[cfg.kind](cfg)
    except (OSError, ValueError, TypeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    if cfg.kind == "props" and not result.get("passed", False):
        return EXIT_CHECK_FAILED
    if cfg.kind == "discriminate":
        print(json.dumps({k: result[k] for k in ("fdt_separates", "ppl_separates")}))
    print(f"done: artifacts in {cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
