"""``towgame`` command line.

Exit codes: 0 when every acceptance check of the run passes, 1 when some check
fails, 2 for an invalid command line or configuration, 3 when the run aborts
with an error. On any nonzero exit a JSON failure report is written to
``<out>/failures.json`` (when ``--out`` is usable) and printed to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numba
from pydantic import ValidationError

from .experiments import EXPERIMENTS, load_config, run_experiment
from .io import dumps

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ERROR = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="towgame", description="Discounted tug-of-war experiments.")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, type=Path, help="experiment configuration (JSON)")
    ap.add_argument("--out", required=True, type=Path, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the configured seed")
    ap.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _report(out: Path | None, kind: str, status: str, failures: list[dict]) -> None:
    report = {"experiment": kind, "status": status, "failures": failures}
    text = dumps(report)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "failures.json").write_text(text)
        except OSError:
            pass
    sys.stdout.write(text)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        _report(args.out, args.experiment, "config-error", [{"name": "threads", "detail": "must be >= 1"}])
        return EXIT_CONFIG
    numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        cfg = load_config(args.config, args.seed)
    except (OSError, json.JSONDecodeError, ValidationError, ValueError) as exc:
        _report(args.out, args.experiment, "config-error", [{"name": "config", "detail": str(exc)}])
        return EXIT_CONFIG
    try:
        result = run_experiment(args.experiment, cfg, args.out, args.threads,
                                base=args.config.resolve().parent)
    except Exception as exc:  # reported, not swallowed: exit code says it failed
        logging.getLogger("towgame").exception("run aborted")
        _report(args.out, args.experiment, "error",
                [{"name": type(exc).__name__, "detail": str(exc)}])
        return EXIT_ERROR
    stale = args.out / "failures.json"
    if result.passed:
        if stale.exists():
            stale.unlink()
        for c in result.checks:
            print(f"PASS  {c.name}")
        return EXIT_OK
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}", file=sys.stderr)
    _report(args.out, args.experiment, "failed", [c.to_json() for c in result.failures()])
    return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
