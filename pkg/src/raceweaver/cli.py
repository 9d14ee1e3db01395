"""Command line interface.

Exit status: 0 when the run finishes with no more findings than
``--fail-on`` allows, 1 when it reports more, 2 on usage or configuration
errors and 3 when an input fails to parse.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from raceweaver import __version__
from raceweaver.heuristics import HeuristicConfig, parse_heuristics
from raceweaver.kir import KirError
from raceweaver.locks import LockConfigError
from raceweaver.pipeline import EXTENSION_NAMES, AnalysisConfig, analyze
from raceweaver.report import build_report, dump_accesses, dump_contexts
from raceweaver.rules import parse_threshold

EXIT_OK, EXIT_FINDINGS, EXIT_USAGE, EXIT_PARSE = 0, 1, 2, 3

log = logging.getLogger("raceweaver")


class UsageError(Exception):
    pass


def workers_from_env() -> int:
    raw = os.environ.get("RACEWEAVER_WORKERS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RACEWEAVER_WORKERS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"RACEWEAVER_WORKERS must be a positive integer, got {raw!r}")
    return n


def parse_extensions(spec: str) -> frozenset[str]:
    spec = spec.strip()
    if spec == "all":
        return frozenset(EXTENSION_NAMES)
    if spec in ("none", ""):
        return frozenset()
    names = frozenset(s.strip() for s in spec.split(",") if s.strip())
    bad = names - set(EXTENSION_NAMES)
    if bad:
        raise ValueError(f"unknown extensions: {', '.join(sorted(bad))}")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raceweaver", description="Infer field locking rules and report outliers.")
    parser.add_argument("--version", action="version", version=f"raceweaver {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    an = sub.add_parser("analyze", help="analyse KIR files")
    an.add_argument("files", nargs="+", help="KIR input files")
    an.add_argument("--threshold", default="1/6", help="report fraction limit, as p/q or a percentage (default 1/6)")
    an.add_argument("--no-context", action="store_true", help="disable context-based suppression")
    an.add_argument("--context-depth", type=int, default=5, help="distance limit of context walks (default 5)")
    an.add_argument("--heuristics", default="all", help="all, none, or a list of init,recheck,safe,write-escape")
    an.add_argument("--extensions", default="all", help="all, none, or a list of lockdep,rwlock")
    an.add_argument("--format", choices=("json", "text"), default="json")
    an.add_argument("--fail-on", type=int, default=None, metavar="N",
                    help="exit with status 1 when more than N violations are reported")
    an.add_argument("--lock-config", help="JSON file listing lock primitives")
    an.add_argument("--raw-counts", action="store_true", help="tally raw access counts instead of use weights")
    an.add_argument("--show-suppressed", action="store_true", help="include suppressed violations and their flags")
    an.add_argument("--recheck-depth", type=int, default=3, help="call depth searched for a locked recheck")
    an.add_argument("--safe-fraction", default="1/10", help="locked call-site share below which a function is safe")
    an.add_argument("--alloc", action="append", default=[], metavar="NAME", help="extra allocation function")
    an.add_argument("--dealloc", action="append", default=[], metavar="NAME", help="extra deallocation function")
    an.add_argument("--dump-callgraph", action="store_true")
    an.add_argument("--dump-accesses", action="store_true")
    an.add_argument("--dump-contexts", action="store_true")
    an.add_argument("-o", "--output", help="write the report here instead of stdout")

    co = sub.add_parser("corpus", help="check a corpus directory against its expectation files")
    co.add_argument("directory")
    return parser


def _config(args, workers: int) -> AnalysisConfig:
    for f in args.files:
        if not Path(f).is_file():
            raise UsageError(f"input file {f} not found")
    if args.lock_config and not Path(args.lock_config).is_file():
        raise UsageError(f"lock config {args.lock_config} not found")
    try:
        base = HeuristicConfig()
        options = HeuristicConfig(
            alloc_base=base.alloc_base | frozenset(args.alloc),
            dealloc_base=base.dealloc_base | frozenset(args.dealloc),
            safe_fn_fraction=parse_threshold(args.safe_fraction),
            recheck_call_depth=args.recheck_depth,
        )
        return AnalysisConfig(
            inputs=tuple(args.files),
            threshold=parse_threshold(args.threshold),
            context=not args.no_context,
            context_depth=args.context_depth,
            heuristics=parse_heuristics(args.heuristics),
            extensions=parse_extensions(args.extensions),
            lock_config=args.lock_config,
            output_format=args.format,
            raw_counts=args.raw_counts,
            show_suppressed=args.show_suppressed,
            heuristic_options=options,
            workers=workers,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _analyze(args, workers: int) -> int:
    config = _config(args, workers)
    try:
        analysis = analyze(config)
    except KirError as exc:
        print(f"raceweaver: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except LockConfigError as exc:
        raise UsageError(str(exc)) from None
    report = build_report(analysis)
    # audit dumps go to stderr when stdout carries JSON
    dump_stream = sys.stderr if config.output_format == "json" and not args.output else sys.stdout
    if args.dump_callgraph:
        dump_stream.write(analysis.cg.dump())
    if args.dump_accesses:
        dump_stream.write(dump_accesses(analysis))
    if args.dump_contexts:
        dump_stream.write(dump_contexts(analysis))
    if config.output_format == "json":
        report.timing = {}
        text = report.to_json()
    else:
        text = report.to_text()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.fail_on is not None and len(report.violations) > args.fail_on:
        return EXIT_FINDINGS
    return EXIT_OK


def _corpus(args, workers: int) -> int:
    from raceweaver.corpus import evaluate_corpus

    try:
        result = evaluate_corpus(args.directory, workers)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(result.summary())
    return EXIT_OK if result.ok else EXIT_FINDINGS


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        workers = workers_from_env()
        if args.command == "analyze":
            return _analyze(args, workers)
        return _corpus(args, workers)
    except UsageError as exc:
        print(f"raceweaver: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
