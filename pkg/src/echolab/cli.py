"""Command-line entry point: ``echolab <stage> --config FILE --out DIR``.

Exit codes: 0 success, 1 usage error (bad flags or config), 2 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigFileError, PipelineConfig, load_config
from .pipeline import STAGES, RunDir, StaleArtifactError, run_e2e, run_stage

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="echolab", description="Desk-scale synthetic echocardiogram pipeline.")
    p.add_argument("command", choices=(*STAGES, "e2e"), help="stage to run, or e2e for all of them")
    p.add_argument("--config", help="key = value config file (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=_seed, help="master seed, overrides [run] seed")
    p.add_argument("--stage", choices=STAGES, help="with e2e: stop after this stage")
    p.add_argument("--force", action="store_true", help="rerun finished stages; discard a run made with another config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigFileError as exc:
        print(f"echolab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.stage and args.command != "e2e":
        print("echolab: --stage only applies to e2e", file=sys.stderr)
        return EXIT_USAGE
    try:
        run = RunDir(args.out, cfg, force=args.force)
        if args.command == "e2e":
            run_e2e(run, force=args.force, until=args.stage)
            rec = run.last(args.stage or STAGES[-1])
        else:
            rec = run_stage(run, args.command, force=args.force)
    except StaleArtifactError as exc:
        print(f"echolab: stale artifact: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # any stage failure maps to exit code 2
        logging.getLogger("echolab").debug("stage failure", exc_info=True)
        print(f"echolab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps({"stage": rec["stage"], "info": rec["info"]}, indent=1, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
