"""Command line front end: run, summarize, compare, validate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .errors import ConfigError
from .harness import (
    compare_runs,
    config_to_dict,
    export_residual_traces,
    load_config,
    run_experiment,
    summarize_volume,
    validate_config,
)
from .transport import read_ledger_jsonl

_SYNC_PREFIX = {"hsadmm": "z_sync", "flat": "z_sync", "dense": "grad", "topk": "topk"}


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.baseline is not None:
        overrides["baseline"] = args.baseline
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    result = run_experiment(cfg)
    if result.out_dir:
        export_residual_traces(result.metrics, result.out_dir)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return 0


def _cmd_summarize(args) -> int:
    run_dir = args.run
    entries = read_ledger_jsonl(os.path.join(run_dir, "ledger.jsonl"))
    with open(os.path.join(run_dir, "summary.json"), "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    prefix = _SYNC_PREFIX.get(summary.get("baseline", "hsadmm"), "z_sync")
    dense = summary.get("volume", {}).get("dense_sync_bytes")
    report = summarize_volume(entries, label_prefix=prefix, dense_bytes=dense)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_compare(args) -> int:
    print(json.dumps(compare_runs(args.a, args.b), indent=2, sort_keys=True))
    return 0


def _cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
        validate_config(cfg)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    print("ok", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="admmprune",
        description="Deterministic hierarchical consensus training simulator with structured pruning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--baseline", choices=["dense", "topk", "flat", "hsadmm"], default=None)
    run_p.add_argument("--out", default=None)
    run_p.set_defaults(func=_cmd_run)

    sum_p = sub.add_parser("summarize", help="volume report for a completed run directory")
    sum_p.add_argument("--run", required=True)
    sum_p.set_defaults(func=_cmd_summarize)

    cmp_p = sub.add_parser("compare", help="byte-volume ratios between two run directories")
    cmp_p.add_argument("--a", required=True)
    cmp_p.add_argument("--b", required=True)
    cmp_p.set_defaults(func=_cmd_compare)

    val_p = sub.add_parser("validate", help="lint a config file")
    val_p.add_argument("--config", required=True)
    val_p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
