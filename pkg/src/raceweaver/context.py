"""Context sources of field accesses and the distance-weighted verdict.

The context of an access is the set of places its address was built from:
parameters of the enclosing (or a calling) function and globals.  Each
source is reached at an indirection distance Δ that grows by one per
``load``, by one per crossing into a callee's return value, and by the
number of indices of every ``addr``.  A parameter source continues into
every caller of the function, where each caller's share of the weight is
divided by the number of call sites.

For a rule, the accesses along one source are split into locked and
unlocked ones.  A violation survives when, for at least one of its
sources, the locked accesses are on average strictly closer to the source
than the unlocked ones.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from raceweaver.kir import InstrRef, is_local, is_symbol

log = logging.getLogger(__name__)

DEFAULT_DEPTH_LIMIT = 5
MAX_WALK_STEPS = 20000


@dataclass(frozen=True, order=True)
class ContextSource:
    kind: str  # "param" | "global" | "unknown"
    function: str = ""
    index: int = -1
    name: str = ""

    @classmethod
    def param(cls, function: str, index: int) -> "ContextSource":
        return cls("param", function, index)

    @classmethod
    def global_(cls, name: str) -> "ContextSource":
        return cls("global", name=name)

    @classmethod
    def unknown(cls) -> "ContextSource":
        return cls("unknown")

    def __str__(self) -> str:
        if self.kind == "param":
            return f"{self.function}#arg{self.index}"
        if self.kind == "global":
            return "@" + self.name
        return "<unknown>"


@dataclass(frozen=True, order=True)
class ContextEdge:
    instr: InstrRef
    source: ContextSource
    distance: Fraction
    weight: Fraction
    locked: bool = False


@dataclass(frozen=True)
class SourceVerdict:
    source: ContextSource
    locked_avg: Fraction | None
    unlocked_avg: Fraction | None

    @property
    def report(self) -> bool:
        return (self.locked_avg is not None and self.unlocked_avg is not None
                and self.locked_avg < self.unlocked_avg)


class ContextWalker:
    """Backwards walk from an address to its sources, memoised per value."""

    def __init__(self, program, cg, alloc_functions: Iterable[str] = (), depth_limit: int = DEFAULT_DEPTH_LIMIT):
        if depth_limit < 1:
            raise ValueError("context depth limit must be at least 1")
        self.program = program
        self.cg = cg
        self.alloc = frozenset(alloc_functions)
        self.depth_limit = depth_limit
        self.truncated = 0
        self._memo: dict[tuple[str, str], tuple[tuple[ContextSource, Fraction, Fraction], ...]] = {}

    def sources(self, function: str, value: str) -> tuple[tuple[ContextSource, Fraction, Fraction], ...]:
        """(source, distance, weight) triples; weights of equal
        (source, distance) pairs are summed."""
        key = (function, value)
        if key not in self._memo:
            acc: dict[tuple[ContextSource, Fraction], Fraction] = defaultdict(Fraction)
            budget = [MAX_WALK_STEPS]
            self._walk(self.program.index[function], value, 0, Fraction(1), (), frozenset(), acc, budget)
            if budget[0] < 0:
                self.truncated += 1
            self._memo[key] = tuple(sorted((s, d, w) for (s, d), w in acc.items()))
        return self._memo[key]

    def _walk(self, fi, v: str, dist: int, weight: Fraction, stack: tuple, seen: frozenset, acc, budget) -> None:
        budget[0] -= 1
        if budget[0] < 0:
            return
        if dist > self.depth_limit:
            acc[(ContextSource.unknown(), Fraction(self.depth_limit))] += weight
            return
        if is_symbol(v):
            if v[1:] in self.program.module.globals:
                acc[(ContextSource.global_(v[1:]), Fraction(dist))] += weight
            return
        if not is_local(v):
            return
        state = (fi.name, v, stack)
        if state in seen:
            return
        seen = seen | {state}
        idx = fi.param_index(v)
        if idx is not None:
            self._cross_to_callers(fi, idx, dist, weight, stack, seen, acc, budget)
            return
        ins = fi.defs.get(v)
        if ins is None:
            return
        op = ins.opcode
        if op == "addr":
            self._walk(fi, ins.operands[0], dist + len(ins.path), weight, stack, seen, acc, budget)
        elif op == "load":
            self._walk(fi, ins.operands[0], dist + 1, weight, stack, seen, acc, budget)
        elif op == "cast":
            self._walk(fi, ins.operands[0], dist, weight, stack, seen, acc, budget)
        elif op in ("phi", "select"):
            for o in ins.operands if op == "phi" else ins.operands[1:]:
                self._walk(fi, o, dist, weight, stack, seen, acc, budget)
        elif ins.is_call:
            site = fi.def_ref[v]
            targets = self.cg.callees(site)
            if targets & self.alloc:
                return  # fresh allocations are initialisation, never context
            for t in sorted(targets):
                callee = self.program.index.get(t)
                if callee is None:
                    continue
                for _, r in callee.returns():
                    if r.operands:
                        self._walk(callee, r.operands[0], dist + 1, weight, stack + (site,), seen, acc, budget)

    def _cross_to_callers(self, fi, idx: int, dist: int, weight: Fraction, stack: tuple, seen, acc, budget) -> None:
        if stack:
            # returning from a callee entered through its return value
            site = stack[-1]
            caller = self.program.index[site.function]
            args = caller.by_ref[site].call_args
            if idx < len(args):
                self._walk(caller, args[idx], dist, weight, stack[:-1], seen, acc, budget)
            return
        acc[(ContextSource.param(fi.name, idx), Fraction(dist))] += weight
        sites = self.cg.call_sites_of(fi.name)
        for site in sites:
            caller = self.program.index[site.function]
            args = caller.by_ref[site].call_args
            if idx < len(args):
                self._walk(caller, args[idx], dist, weight / len(sites), (), seen, acc, budget)


def compute_context_sources(access, walker: ContextWalker) -> tuple[tuple[ContextSource, Fraction, Fraction], ...]:
    """Sources of one access as (source, Δ, weight) triples."""
    if access.address is None or access.partial:
        return ()
    return walker.sources(access.instr.function, access.address)


def rule_edges(rule, records, walker: ContextWalker) -> list[ContextEdge]:
    """Context edges of every access to ``rule.field`` (one per instruction),
    marked locked or unlocked with respect to ``rule.lock``."""
    seen: set[InstrRef] = set()
    out = []
    for r in records:
        if r.chain.partial or r.instr in seen or not r.chain.implies(rule.field):
            continue
        seen.add(r.instr)
        locked = rule.lock in r.locks
        for source, dist, weight in compute_context_sources(r.access, walker):
            out.append(ContextEdge(r.instr, source, dist, weight, locked))
    return sorted(out)


def weighted_average(edges: Iterable[ContextEdge]) -> Fraction | None:
    total_w = Fraction(0)
    total = Fraction(0)
    for e in edges:
        total_w += e.weight
        total += e.weight * e.distance
    return total / total_w if total_w else None


def context_decide(rule, edges: Iterable[ContextEdge]) -> dict[ContextSource, SourceVerdict]:
    """Per-source verdicts for ``rule``; a source reports when its locked
    accesses are strictly closer on average than its unlocked ones."""
    by_source: dict[ContextSource, list[ContextEdge]] = defaultdict(list)
    for e in edges:
        by_source[e.source].append(e)
    out = {}
    for source in sorted(by_source):
        es = by_source[source]
        out[source] = SourceVerdict(
            source,
            weighted_average(e for e in es if e.locked),
            weighted_average(e for e in es if not e.locked),
        )
    return out


def violation_survives(instr: InstrRef, edges: Iterable[ContextEdge],
                       verdicts: dict[ContextSource, SourceVerdict]) -> bool:
    """True when any source of the access at ``instr`` reports."""
    return any(verdicts[e.source].report for e in edges if e.instr == instr)
