"""Command line: ``lstsd run|compare|gradcheck``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checks
from .errors import ConfigError, ValidationError
from .experiment import OUT_ENV, compare_runs, load_reports, parse_config, run_experiment, schema_help


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lstsd",
        description="Long/short-term sample distillation experiments.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=schema_help() + f"\n\nenvironment:\n  {OUT_ENV}  default output root (fallback ./runs)",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every policy x seed x sweep cell of a config")
    run.add_argument("config", type=Path)
    run.add_argument("--seed-override", type=_seeds, metavar="S1,S2,...", help="replace run.seeds")
    run.add_argument("--out", type=Path, help="output root (overrides run.out and $" + OUT_ENV + ")")

    cmp_ = sub.add_parser("compare", help="tabulate finished runs against a reference policy")
    cmp_.add_argument("dirs", nargs="+", type=Path)
    cmp_.add_argument("--reference", required=True, help="policy kind or run label of the reference row")

    sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "gradcheck":
        return checks.main()

    if args.command == "compare":
        try:
            table = compare_runs(load_reports(args.dirs), args.reference)
        except ValidationError as err:
            print(f"error: {err}", file=sys.stderr)
            return 2
        print(table.format(), end="")
        return 0

    try:
        cfg = parse_config(args.config.read_text())
        if args.seed_override:
            cfg = cfg.with_seeds(args.seed_override)
        result = run_experiment(cfg, args.out)
    except (ConfigError, ValidationError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(f"results in {result.out_dir}")
    if not result.ok:
        for stem, msg in result.failures:
            print(f"failed: {stem}: {msg}", file=sys.stderr)
        return 1
    print(result.table.format(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
