"""Corpus harness: analyse every ``<case>.kir`` next to its
``<case>.expect.json`` under a context × heuristics configuration matrix
and compare rules, minimal thresholds and reported findings."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from raceweaver.heuristics import HEURISTIC_NAMES, parse_heuristics
from raceweaver.kir import KirError
from raceweaver.pipeline import EXTENSION_NAMES, AnalysisConfig, analyze
from raceweaver.report import format_fraction, format_percent
from raceweaver.rules import minimal_detection_threshold, parse_threshold

log = logging.getLogger(__name__)

CELLS = {
    "context=on,heuristics=on": (True, frozenset(HEURISTIC_NAMES)),
    "context=on,heuristics=off": (True, frozenset()),
    "context=off,heuristics=on": (False, frozenset(HEURISTIC_NAMES)),
    "context=off,heuristics=off": (False, frozenset()),
}


class ExpectationError(ValueError):
    pass


@dataclass
class CellResult:
    cell: str
    mismatches: list[str] = field(default_factory=list)
    reported: list[tuple[str, str, str]] = field(default_factory=list)


@dataclass
class CaseResult:
    name: str
    cells: list[CellResult] = field(default_factory=list)
    thresholds: list[tuple[str, str, Fraction]] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and all(not c.mismatches for c in self.cells)


@dataclass
class CorpusResult:
    cases: list[CaseResult]

    @property
    def ok(self) -> bool:
        return bool(self.cases) and all(c.ok for c in self.cases)

    def summary(self) -> str:
        lines = []
        for case in self.cases:
            lines.append(f"{'PASS' if case.ok else 'FAIL'} {case.name}")
            if case.error:
                lines.append(f"    error: {case.error}")
            for cell in case.cells:
                for m in cell.mismatches:
                    lines.append(f"    [{cell.cell}] {m}")
        lines.append("")
        lines.append("Minimal detection thresholds:")
        for case in self.cases:
            for fld, lock, t in case.thresholds:
                lines.append(f"  {case.name:<24} {fld} by {lock}: {format_fraction(t)} = {format_percent(t)}")
        passed = sum(c.ok for c in self.cases)
        lines.append("")
        lines.append(f"{passed}/{len(self.cases)} cases passed")
        return "\n".join(lines) + "\n"


def _base_config(path: Path, exp: dict, workers: int) -> AnalysisConfig:
    cfg = exp.get("config", {})
    if not isinstance(cfg, dict):
        raise ExpectationError("'config' must be an object")
    try:
        return AnalysisConfig(
            inputs=(str(path),),
            threshold=parse_threshold(cfg.get("threshold", "1/6")),
            context_depth=int(cfg.get("context_depth", 5)),
            extensions=frozenset(cfg.get("extensions", EXTENSION_NAMES)),
            raw_counts=bool(cfg.get("raw_counts", False)),
            workers=workers,
        )
    except (TypeError, ValueError) as exc:
        raise ExpectationError(str(exc)) from None


def _check_cell(name: str, analysis, want: dict) -> CellResult:
    res = CellResult(name)
    got_rules = {(str(r.field), str(r.lock)): r for r in analysis.rules.values()}
    raw = analysis.config.raw_counts
    for rule in want.get("rules", []):
        key = (rule["field"], rule["lock"])
        r = got_rules.get(key)
        if r is None:
            res.mismatches.append(f"missing rule {key[0]} by {key[1]}")
            continue
        for attr in ("locked_weight", "unlocked_weight", "locked_tally", "unlocked_tally"):
            if attr in rule and getattr(r, attr) != rule[attr]:
                res.mismatches.append(f"rule {key[0]} by {key[1]}: {attr} {getattr(r, attr)} != {rule[attr]}")
        if "min_threshold" in rule:
            have = minimal_detection_threshold(r, raw)
            if have != parse_threshold(rule["min_threshold"]):
                res.mismatches.append(f"rule {key[0]} by {key[1]}: minimal threshold "
                                      f"{format_fraction(have)} != {rule['min_threshold']}")
    for key in want.get("absent_rules", []):
        if tuple(key) in got_rules:
            res.mismatches.append(f"unexpected rule {key[0]} by {key[1]}")
    res.reported = sorted({(str(v.rule.field), str(v.rule.lock), v.function) for v in analysis.reported})
    if "reported" in want:
        expected = sorted({tuple(x) for x in want["reported"]})
        if expected != res.reported:
            res.mismatches.append(f"reported {res.reported} != expected {expected}")
    for entry in want.get("context", []):
        verdicts = {(str(k[0]), str(k[1])): v for k, v in analysis.verdicts.items()}
        rule_v = verdicts.get((entry["field"], entry["lock"]))
        found = None
        if rule_v is not None:
            found = next((v for s, v in rule_v.items() if str(s) == entry["source"]), None)
        if found is None:
            res.mismatches.append(f"no context verdict for {entry['field']} by {entry['lock']} at {entry['source']}")
            continue
        for attr in ("locked_avg", "unlocked_avg"):
            if attr in entry:
                have = getattr(found, attr)
                exp_v = None if entry[attr] is None else _rational(entry[attr])
                if have != exp_v:
                    res.mismatches.append(f"{entry['field']} at {entry['source']}: {attr} {have} != {exp_v}")
        if "verdict" in entry and ("report" if found.report else "suppress") != entry["verdict"]:
            res.mismatches.append(f"{entry['field']} at {entry['source']}: verdict mismatch")
    if "rw_violations" in want and len(analysis.rw_violations) != want["rw_violations"]:
        res.mismatches.append(f"{len(analysis.rw_violations)} rw violations != {want['rw_violations']}")
    if "assertion_violations" in want and len(analysis.assertion_violations) != want["assertion_violations"]:
        res.mismatches.append(f"{len(analysis.assertion_violations)} assertion violations"
                              f" != {want['assertion_violations']}")
    return res


def _rational(text) -> Fraction:
    return Fraction(str(text))


def evaluate_case(kir: Path, expect: Path, workers: int = 1) -> CaseResult:
    case = CaseResult(kir.stem)
    try:
        exp = json.loads(expect.read_text())
        if not isinstance(exp, dict) or not isinstance(exp.get("cells", {}), dict):
            raise ExpectationError("expectation must be an object with a 'cells' object")
        base = _base_config(kir, exp, workers)
        for name in CELLS:
            context, heur = CELLS[name]
            if name in exp.get("cells", {}) and "heuristics" in exp["cells"][name]:
                heur = parse_heuristics(exp["cells"][name]["heuristics"])
            analysis = analyze(replace(base, context=context, heuristics=heur))
            if name == "context=off,heuristics=off":
                raw = base.raw_counts
                case.thresholds = [(str(r.field), str(r.lock), minimal_detection_threshold(r, raw))
                                   for r in analysis.rules.values()]
            want = exp.get("cells", {}).get(name)
            if want is not None:
                case.cells.append(_check_cell(name, analysis, want))
        unknown = set(exp.get("cells", {})) - set(CELLS)
        if unknown:
            raise ExpectationError(f"unknown matrix cells {sorted(unknown)}")
    except (OSError, ValueError, KeyError, TypeError, KirError) as exc:
        case.error = f"{type(exc).__name__}: {exc}"
    return case


def evaluate_corpus(directory: str | Path, workers: int = 1) -> CorpusResult:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory {directory} not found")
    cases = []
    for kir in sorted(directory.glob("*.kir")):
        expect = kir.with_suffix(".expect.json")
        if not expect.exists():
            res = CaseResult(kir.stem, error="missing expectation file")
        else:
            res = evaluate_case(kir, expect, workers)
        cases.append(res)
    return CorpusResult(cases)
