"""End-to-end analysis: parse, build the call graph, compute lock coverage,
extract accesses, infer rules, filter violations and run the extensions."""

from __future__ import annotations

import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

from raceweaver import __version__
from raceweaver.callgraph import CallGraph, build_call_graph
from raceweaver.context import DEFAULT_DEPTH_LIMIT, ContextWalker, SourceVerdict, context_decide, rule_edges
from raceweaver.extensions import AssertionViolation, RwViolation, check_assertions, check_rw_violations
from raceweaver.fields import FieldAccess, FieldExtractor
from raceweaver.heuristics import (
    HEURISTIC_NAMES,
    HeuristicConfig,
    RecheckDetector,
    TaintIndex,
    detect_alloc_dealloc_wrappers,
    detect_safe_functions,
    escapes_only_into,
    taint_init_cleanup,
    write_or_escape_filter,
)
from raceweaver.kir import KirSemanticError, Module, parse_module
from raceweaver.kir.parser import _address_taken
from raceweaver.locks import CoverageMap, LockConfig, compute_lock_coverage, detect_lock_wrappers
from raceweaver.program import Program
from raceweaver.rules import (
    AccessRecord,
    PotentialRule,
    Violation,
    access_records,
    check_threshold,
    detect_violations,
    infer_rules,
)

log = logging.getLogger(__name__)

EXTENSION_NAMES = ("lockdep", "rwlock")


@dataclass(frozen=True)
class AnalysisConfig:
    inputs: tuple[str, ...] = ()
    threshold: Fraction = Fraction(1, 6)
    context: bool = True
    context_depth: int = DEFAULT_DEPTH_LIMIT
    heuristics: frozenset[str] = frozenset(HEURISTIC_NAMES)
    extensions: frozenset[str] = frozenset(EXTENSION_NAMES)
    lock_config: str | None = None
    output_format: str = "json"
    raw_counts: bool = False
    show_suppressed: bool = False
    heuristic_options: HeuristicConfig = field(default_factory=HeuristicConfig)
    workers: int = 1

    def __post_init__(self):
        check_threshold(self.threshold)
        if self.context_depth < 1:
            raise ValueError("context depth must be at least 1")
        bad = set(self.extensions) - set(EXTENSION_NAMES)
        if bad:
            raise ValueError(f"unknown extensions: {', '.join(sorted(bad))}")
        bad = set(self.heuristics) - set(HEURISTIC_NAMES)
        if bad:
            raise ValueError(f"unknown heuristics: {', '.join(sorted(bad))}")
        if self.output_format not in ("json", "text"):
            raise ValueError(f"unknown output format {self.output_format!r}")
        if self.workers < 1:
            raise ValueError("worker count must be positive")

    def echo(self) -> dict:
        """Configuration as it appears in reports (worker count excluded)."""
        return {
            "inputs": sorted(Path(p).name for p in self.inputs),
            "threshold": f"{self.threshold.numerator}/{self.threshold.denominator}",
            "context": self.context,
            "context_depth": self.context_depth,
            "heuristics": sorted(self.heuristics),
            "extensions": sorted(self.extensions),
            "raw_counts": self.raw_counts,
        }


@dataclass
class Analysis:
    """Every intermediate result of one run, kept for dumps and tests."""

    config: AnalysisConfig
    program: Program
    cg: CallGraph
    coverage: CoverageMap
    extractor_diagnostics: Counter
    accesses: list[FieldAccess]
    records: list[AccessRecord]
    tallied: list[AccessRecord]
    rules: dict[tuple, PotentialRule]
    kept_rules: dict[tuple, PotentialRule]
    violations: list[Violation]
    verdicts: dict[tuple, dict] = field(default_factory=dict)
    edges: dict[tuple, list] = field(default_factory=dict)
    safe_functions: frozenset[str] = frozenset()
    tainted: frozenset = frozenset()
    assertion_violations: list[AssertionViolation] = field(default_factory=list)
    rw_violations: list[RwViolation] = field(default_factory=list)
    messages: list[str] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def reported(self) -> list[Violation]:
        return [v for v in self.violations if v.reported]

    @property
    def suppressed(self) -> list[Violation]:
        return [v for v in self.violations if not v.reported]


def merge_modules(modules: Iterable[Module]) -> Module:
    """Combine separately parsed files; identical re-declarations are allowed."""
    out = Module()
    for m in modules:
        for name, layout in m.types.structs.items():
            prev = out.types.structs.get(name)
            if prev is not None and prev != layout:
                raise KirSemanticError(f"conflicting declarations of type {name!r}")
            out.types.structs[name] = layout
        out.types.lock_types = frozenset(out.types.lock_types | m.types.lock_types)
        for name, g in m.globals.items():
            prev = out.globals.get(name)
            if prev is not None and prev != g:
                raise KirSemanticError(f"conflicting declarations of global {name!r}")
            out.globals[name] = g
        for name, fn in m.functions.items():
            if name in out.functions:
                raise KirSemanticError(f"function {name!r} defined twice")
            out.functions[name] = fn
    taken = _address_taken(out.functions)
    for name, fn in out.functions.items():
        fn.is_address_taken = name in taken
    out.functions = dict(sorted(out.functions.items()))
    return out


def load_module(paths: Iterable[str]) -> Module:
    modules = []
    for p in sorted(paths):
        modules.append(parse_module(Path(p).read_bytes()))
    if len(modules) == 1:
        return modules[0]
    return merge_modules(modules)


def _extract(program: Program, workers: int) -> tuple[list[FieldAccess], Counter, list[str]]:
    def one(fi):
        ex = FieldExtractor(program)
        return ex.extract_function(fi), ex.diagnostics, ex.messages

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, program.functions()))
    accesses: list[FieldAccess] = []
    diag: Counter = Counter()
    messages: list[str] = []
    for acc, d, msgs in results:
        accesses.extend(acc)
        diag.update(d)
        messages.extend(msgs)
    return sorted(accesses), diag, messages


def analyze_module(module: Module, config: AnalysisConfig) -> Analysis:
    timing: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name: str) -> None:
        nonlocal clock
        now = time.perf_counter()
        timing[name] = now - clock
        clock = now

    workers = config.workers
    program = Program(module)
    cg = build_call_graph(program)
    lap("callgraph")

    lock_config = LockConfig.load(config.lock_config) if config.lock_config else LockConfig()
    wrappers = detect_lock_wrappers(program, cg, lock_config, workers)
    coverage = compute_lock_coverage(program, cg, wrappers, lock_config, workers)
    lap("coverage")

    accesses, ex_diag, messages = _extract(program, workers)
    records = access_records(accesses, coverage)
    extractor = FieldExtractor(program)
    lap("fields")

    heur = config.heuristics
    alloc_info = detect_alloc_dealloc_wrappers(program, cg, config.heuristic_options)
    tainted: frozenset = frozenset()
    taint_ix = None
    if "init" in heur:
        tainted = taint_init_cleanup(program, cg, extractor, alloc_info)
        taint_ix = TaintIndex(program, tainted)
    tallied = [r for r in records if taint_ix is None or taint_ix.covers(r.access) is None]

    rules = infer_rules(tallied, is_lock_field=lambda c: extractor.is_lock_chain(c.steps))
    violations = detect_violations(rules, records, config.threshold, config.raw_counts)
    lap("rules")

    safe: frozenset[str] = frozenset()
    if "safe" in heur:
        safe = detect_safe_functions(program, cg, coverage, accesses, config.heuristic_options.safe_fn_fraction)
    kept = write_or_escape_filter(rules, tallied, cg, safe) if "write-escape" in heur else dict(rules)
    recheck = (RecheckDetector(program, cg, coverage, records, config.heuristic_options.recheck_call_depth)
               if "recheck" in heur else None)

    walker = ContextWalker(program, cg, alloc_info.alloc, config.context_depth)
    verdicts: dict[tuple, dict[object, SourceVerdict]] = {}
    edges: dict[tuple, list] = {}
    flagged: list[Violation] = []
    for v in violations:
        flags = []
        if taint_ix is not None and taint_ix.covers(v.access) is not None:
            flags.append("init-cleanup")
        if v.rule_key not in kept:
            flags.append("write-escape")
        if safe and escapes_only_into(v.access, cg, safe):
            flags.append("safe-fn")
        if recheck is not None and recheck.is_recheck(v):
            flags.append("recheck")
        if config.context:
            if v.rule_key not in verdicts:
                edges[v.rule_key] = rule_edges(v.rule, tallied, walker)
                verdicts[v.rule_key] = context_decide(v.rule, edges[v.rule_key])
            rule_v = verdicts[v.rule_key]
            if not any(rule_v[e.source].report for e in edges[v.rule_key] if e.instr == v.access.instr):
                flags.append("context")
        flagged.append(v.flag(*flags) if flags else v)
    if walker.truncated:
        messages.append(f"{walker.truncated} context walks hit the step budget")
    lap("filters")

    assertion_violations: list[AssertionViolation] = []
    rw: list[RwViolation] = []
    if "lockdep" in config.extensions:
        assertion_violations = check_assertions(coverage, cg)
    if "rwlock" in config.extensions:
        rw = check_rw_violations(rules, records, coverage)
    lap("extensions")

    messages.extend(coverage.analysis.diagnostics)
    return Analysis(
        config=config, program=program, cg=cg, coverage=coverage, extractor_diagnostics=ex_diag,
        accesses=accesses, records=records, tallied=tallied, rules=rules, kept_rules=kept,
        violations=sorted(flagged, key=Violation.sort_key), verdicts=verdicts, edges=edges,
        safe_functions=safe, tainted=tainted, assertion_violations=assertion_violations,
        rw_violations=rw, messages=messages, timing=timing,
    )


def analyze(config: AnalysisConfig) -> Analysis:
    return analyze_module(load_module(config.inputs), config)


def run(config: AnalysisConfig):
    """Run the whole pipeline and build its :class:`~raceweaver.report.Report`."""
    from raceweaver.report import build_report

    return build_report(analyze(config))


TOOL_VERSION = __version__
