"""Command-line entry point: one verb per pipeline stage plus run-full.

Every verb runs the pipeline up to and including its stage; upstream
stages with valid cached outputs are skipped.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import STAGES, ConfigError, LeakageError, PipelineConfig, Run, StageError
from .biomarkers import FoldLeakageError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
VERBS = {s: s for s in STAGES} | {"run-full": "report"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dlebm", description="DL-biomarker + EBM pipeline on synthetic cohorts")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in VERBS:
        sp = sub.add_parser(verb, help=f"run the pipeline through '{VERBS[verb]}'")
        sp.add_argument("--config", "-c", required=True, help="YAML config file")
        sp.add_argument("--out", "-o", required=True, help="run directory")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=12 (repeatable)")
        sp.add_argument("--force", action="store_true", help="rerun this stage even if cached")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = PipelineConfig.load(args.config, args.overrides)
        run = Run(cfg, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    stage = VERBS[args.verb]
    try:
        run.run(stage, force=[stage] if args.force else ())
    except (StageError, LeakageError, FoldLeakageError) as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE
    print(f"{args.verb}: ok ({run.root})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
