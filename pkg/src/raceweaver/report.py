"""Deterministic JSON and text reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from raceweaver import __version__

SCHEMA_VERSION = 1


def format_fraction(x: Fraction) -> str:
    x = Fraction(x)
    return f"{x.numerator}/{x.denominator}"


def format_percent(x: Fraction) -> str:
    """Percentage with two decimals, rounded half-up from the exact value."""
    x = Fraction(x)
    n, d = x.numerator, x.denominator
    hundredths = (2 * n * 10000 + d) // (2 * d)
    return f"{hundredths // 100}.{hundredths % 100:02d}%"


def _optional_fraction(x: Fraction | None) -> str | None:
    return None if x is None else format_fraction(x)


def _rule_dict(rule, raw_counts: bool = False) -> dict:
    frac = rule.ratio(raw_counts)
    return {
        "field": str(rule.field),
        "lock": str(rule.lock),
        "locked_tally": rule.locked_tally,
        "unlocked_tally": rule.unlocked_tally,
        "locked_weight": rule.locked_weight,
        "unlocked_weight": rule.unlocked_weight,
        "type_locked_weight": rule.type_locked_weight,
        "type_unlocked_weight": rule.type_unlocked_weight,
        "fraction": format_fraction(frac),
        "percent": format_percent(frac),
    }


def _violation_dict(v, cg, with_flags: bool) -> dict:
    a = v.access
    out = {
        "field": str(v.rule.field),
        "lock": str(v.rule.lock),
        "function": v.function,
        "instruction": v.location,
        "chain": v.chain,
        "kind": a.kind,
        "weight": a.weight,
        "fraction": format_fraction(v.fraction),
        "percent": format_percent(v.fraction),
        "locked_weight": v.rule.locked_weight,
        "unlocked_weight": v.rule.unlocked_weight,
    }
    if a.kind == "escape":
        out["callee"] = a.callee
        out["arg_index"] = a.arg_index
    if with_flags:
        out["suppressed_by"] = sorted(v.suppressed_by)
    return out


@dataclass
class Report:
    version: str
    config: dict
    rules: list[dict]
    violations: list[dict]
    suppressed: list[dict]
    assertion_violations: list[dict]
    rw_violations: list[dict]
    context: list[dict]
    diagnostics: dict
    timing: dict[str, float] = field(default_factory=dict)
    show_suppressed: bool = False

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "tool": {"name": "raceweaver", "version": self.version},
            "config": self.config,
            "summary": {
                "rules": len(self.rules),
                "violations": len(self.violations),
                "suppressed": len(self.suppressed),
                "assertion_violations": len(self.assertion_violations),
                "rw_violations": len(self.rw_violations),
            },
            "rules": self.rules,
            "violations": self.violations,
            "assertion_violations": self.assertion_violations,
            "rw_violations": self.rw_violations,
            "context": self.context,
            "diagnostics": self.diagnostics,
        }
        if self.show_suppressed:
            out["suppressed"] = self.suppressed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        lines = [f"raceweaver {self.version}: {len(self.rules)} rules, {len(self.violations)} violations"
                 f" ({len(self.suppressed)} suppressed) at threshold {self.config['threshold']}"]
        if self.violations:
            lines.append("")
            lines.append("Violations:")
        for v in self.violations:
            lines.append(f"  {v['instruction']}: {v['kind']} of {v['chain']} without {v['lock']}"
                         f" (rule {v['field']}: {v['unlocked_weight']} unlocked / {v['locked_weight']} locked,"
                         f" {v['fraction']} = {v['percent']})")
        if self.show_suppressed and self.suppressed:
            lines.append("")
            lines.append("Suppressed:")
            for v in self.suppressed:
                lines.append(f"  {v['instruction']}: {v['chain']} without {v['lock']}"
                             f" [{', '.join(v['suppressed_by'])}]")
        if self.assertion_violations:
            lines.append("")
            lines.append("Assertion violations:")
            for a in self.assertion_violations:
                path = " -> ".join(a["witness"]) if a["witness"] is not None else "no witness within bound"
                lines.append(f"  {a['site']}: {a['lock']} may not be held (via {path or 'entry'})")
        if self.rw_violations:
            lines.append("")
            lines.append("Writes under a read lock:")
            for r in self.rw_violations:
                lines.append(f"  {r['instruction']}: write of {r['chain']} holding {r['lock']} for reading")
        lines.append("")
        lines.append("Rules:")
        for r in self.rules:
            lines.append(f"  {r['field']} by {r['lock']}: {r['locked_weight']} locked,"
                         f" {r['unlocked_weight']} unlocked ({r['percent']})")
        diag = {k: v for k, v in self.diagnostics.items() if v}
        if diag:
            lines.append("")
            lines.append("Diagnostics: " + json.dumps(diag, sort_keys=True))
        if self.timing:
            lines.append("Timing: " + ", ".join(f"{k} {v * 1000:.1f} ms" for k, v in self.timing.items()))
        return "\n".join(lines) + "\n"


def _context_rows(analysis) -> list[dict]:
    rows = []
    for (chain, lock), verdicts in sorted(analysis.verdicts.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
        for source, v in verdicts.items():
            rows.append({
                "field": str(chain),
                "lock": str(lock),
                "source": str(source),
                "locked_avg": _optional_fraction(v.locked_avg),
                "unlocked_avg": _optional_fraction(v.unlocked_avg),
                "verdict": "report" if v.report else "suppress",
            })
    return rows


def build_report(analysis) -> Report:
    config = analysis.config
    cg = analysis.cg
    raw = config.raw_counts
    rules = sorted(analysis.rules.values(), key=lambda r: (r.ratio(raw), str(r.field), str(r.lock)))
    diagnostics = {
        "untraceable_operands": analysis.extractor_diagnostics.get("untraceable_operands", 0),
        "ambiguous_recoveries": analysis.extractor_diagnostics.get("ambiguous_recoveries", 0),
        "trace_depth_exceeded": analysis.extractor_diagnostics.get("trace_depth_exceeded", 0),
        "unresolved_lock_operands": len(analysis.coverage.analysis.unresolved),
        "messages": sorted(set(analysis.messages)),
    }
    return Report(
        version=__version__,
        config=config.echo(),
        rules=[_rule_dict(r, raw) for r in rules],
        violations=[_violation_dict(v, cg, config.show_suppressed) for v in analysis.reported],
        suppressed=[_violation_dict(v, cg, True) for v in analysis.suppressed],
        assertion_violations=[
            {
                "site": str(a.site),
                "function": a.function,
                "lock": str(a.lock),
                "witness": None if a.witness is None else [str(s) for s in a.witness],
            }
            for a in analysis.assertion_violations
        ],
        rw_violations=[
            {
                "instruction": str(r.access.instr),
                "function": r.access.instr.function,
                "chain": str(r.access.chain),
                "field": r.rule_field,
                "lock": str(r.lock),
                "held_mode": r.held_mode,
            }
            for r in analysis.rw_violations
        ],
        context=_context_rows(analysis),
        diagnostics=diagnostics,
        timing=dict(analysis.timing),
        show_suppressed=config.show_suppressed,
    )


# -- audit dumps ------------------------------------------------------------------

def dump_accesses(analysis) -> str:
    rows = []
    for r in analysis.records:
        a = r.access
        locks = ",".join(sorted(str(lk) for lk in r.locks)) or "-"
        rows.append(f"{a.instr.function}\t{a.instr}\t{a.chain}\t{a.kind}\t{a.weight}\t{locks}")
    return "\n".join(sorted(rows)) + ("\n" if rows else "")


def dump_contexts(analysis) -> str:
    rows = []
    for (chain, lock), edges in sorted(analysis.edges.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
        for e in edges:
            fn = e.source.function or "-"
            rows.append(f"{chain}\t{lock}\t{e.instr}\t{e.source.kind}\t{fn}\t{e.source}\t"
                        f"{format_fraction(e.distance)}\t{format_fraction(e.weight)}\t"
                        f"{'locked' if e.locked else 'unlocked'}")
    return "\n".join(rows) + ("\n" if rows else "")
