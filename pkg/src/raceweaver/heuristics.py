"""Filters for accesses that are intentionally left unprotected.

* ``init``: objects being initialised (their lock is written non-atomically,
  or they were just allocated) or torn down (passed to a deallocator) are
  tainted, and their accesses are left out of the rule tallies.
* ``recheck``: an unlocked read whose value decides a branch, where the
  guarded code reads the field again under the rule's lock.
* ``safe``: escapes into functions whose pointer arguments are almost never
  built while a lock is held.
* ``write-escape``: rules whose field is never written under the lock nor
  passed by reference to a function are dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from raceweaver.kir import InstrRef, is_local
from raceweaver.rules import AccessRecord, PotentialRule, implication_closed

log = logging.getLogger(__name__)

HEURISTIC_NAMES = ("init", "recheck", "safe", "write-escape")
DEFAULT_ALLOC_BASE = frozenset({"kmalloc", "kzalloc", "kcalloc", "kvmalloc", "vmalloc", "vzalloc", "malloc", "calloc"})
DEFAULT_DEALLOC_BASE = frozenset({"kfree", "kvfree", "vfree", "free"})


@dataclass(frozen=True)
class HeuristicConfig:
    alloc_base: frozenset[str] = DEFAULT_ALLOC_BASE
    dealloc_base: frozenset[str] = DEFAULT_DEALLOC_BASE
    safe_fn_fraction: Fraction = Fraction(1, 10)
    recheck_call_depth: int = 3
    enabled: frozenset[str] = frozenset(HEURISTIC_NAMES)

    def __post_init__(self):
        if not 0 <= Fraction(self.safe_fn_fraction) <= 1:
            raise ValueError("safe_fn_fraction must lie in [0, 1]")
        unknown = set(self.enabled) - set(HEURISTIC_NAMES)
        if unknown:
            raise ValueError(f"unknown heuristics: {sorted(unknown)}")
        if self.recheck_call_depth < 0:
            raise ValueError("recheck_call_depth must be non-negative")

    def on(self, name: str) -> bool:
        return name in self.enabled


def parse_heuristics(spec: str) -> frozenset[str]:
    """``all``, ``none`` or a comma-separated subset of the heuristic names."""
    spec = spec.strip()
    if spec == "all":
        return frozenset(HEURISTIC_NAMES)
    if spec in ("none", ""):
        return frozenset()
    names = frozenset(s.strip() for s in spec.split(",") if s.strip())
    unknown = names - set(HEURISTIC_NAMES)
    if unknown:
        raise ValueError(f"unknown heuristics: {', '.join(sorted(unknown))}")
    return names


# -- allocation and deallocation wrappers -----------------------------------------

@dataclass(frozen=True)
class AllocInfo:
    alloc: frozenset[str]
    dealloc: dict[str, frozenset[int]] = field(default_factory=dict)

    def __iter__(self):
        return iter((self.alloc, frozenset(self.dealloc)))


def _strip_casts(fi, v: str) -> str:
    seen = set()
    while is_local(v) and v not in seen:
        seen.add(v)
        ins = fi.defs.get(v)
        if ins is None or ins.opcode != "cast":
            break
        v = ins.operands[0]
    return v


def _is_null(op: str) -> bool:
    return op in ("null", "0")


def _returns_allocation(fi, cg, alloc: frozenset[str]) -> bool:
    def fresh(v: str, seen: set) -> bool:
        if not is_local(v) or v in seen:
            return False
        seen.add(v)
        ins = fi.defs.get(v)
        if ins is None:
            return False
        if ins.opcode == "alloc":
            return True
        if ins.is_call:
            return bool(cg.callees(fi.def_ref[v]) & alloc)
        if ins.opcode == "cast":
            return fresh(ins.operands[0], seen)
        if ins.opcode == "phi":
            return any(fresh(o, seen) for o in ins.operands)
        if ins.opcode == "select":
            return any(fresh(o, seen) for o in ins.operands[1:])
        return False

    return any(r.operands and fresh(r.operands[0], set()) for _, r in fi.returns())


def _null_check_target(fi, cond: str, param: str) -> tuple[str, bool] | None:
    """For ``br cond`` testing ``param`` against null: (which, is_eq)."""
    ins = fi.defs.get(cond) if is_local(cond) else None
    if ins is None or ins.opcode != "cmp" or ins.pred not in ("eq", "ne"):
        return None
    a, b = ins.operands
    for x, y in ((a, b), (b, a)):
        if _is_null(y) and _strip_casts(fi, x) == param:
            return (param, ins.pred == "eq")
    return None


def after_null_checks(fi, param: str) -> str:
    """Block holding the first instruction after every leading NULL check of
    ``param`` (following the non-null edge of each check)."""
    label = fi.cfg.entry
    seen = set()
    while label not in seen:
        seen.add(label)
        term = fi.fn.block(label).terminator
        if term is None or term.opcode != "br" or len(term.targets) != 2:
            break
        check = _null_check_target(fi, term.operands[0], param)
        if check is None:
            break
        label = term.targets[1] if check[1] else term.targets[0]
    return label


def _freed_params(fi, cg, dealloc: dict[str, frozenset[int]]) -> frozenset[int]:
    """Parameters handed to a deallocator at a point postdominating the
    first instruction after the parameter's NULL checks."""
    out = set()
    for ref, ins in fi.instrs:
        freed_args: list[str] = []
        if ins.opcode == "free":
            freed_args.append(ins.operands[0])
        elif ins.is_call:
            args = ins.call_args
            for t in cg.callees(ref):
                for j in sorted(dealloc.get(t, ())):
                    if j < len(args):
                        freed_args.append(args[j])
        for arg in freed_args:
            root = _strip_casts(fi, arg)
            idx = fi.param_index(root)
            if idx is None or idx in out:
                continue
            start = after_null_checks(fi, root)
            if ref.block in fi.cfg.reachable and fi.cfg.postdominates(ref.block, start):
                out.add(idx)
    return frozenset(out)


def detect_alloc_dealloc_wrappers(program, cg, config: HeuristicConfig | None = None) -> AllocInfo:
    """Grow the base allocator and deallocator lists to a fixpoint."""
    config = config or HeuristicConfig()
    alloc = set(config.alloc_base)
    dealloc: dict[str, frozenset[int]] = {name: frozenset({0}) for name in config.dealloc_base}
    changed = True
    while changed:
        changed = False
        for fi in program.functions():
            if fi.name in config.alloc_base or fi.name in config.dealloc_base:
                continue
            if fi.name not in alloc and _returns_allocation(fi, cg, frozenset(alloc)):
                alloc.add(fi.name)
                changed = True
            old = dealloc.get(fi.name, frozenset())
            new = old | _freed_params(fi, cg, dealloc)
            if new != old:
                dealloc[fi.name] = new
                changed = True
    return AllocInfo(frozenset(alloc), dict(sorted(dealloc.items())))


# -- init / clean-up taint ----------------------------------------------------

@dataclass(frozen=True)
class TaintedObject:
    function: str
    value: str
    reason: str  # "lock-initialized" | "freshly-allocated" | "being-deallocated"
    start: InstrRef | None = None  # taint holds from here on; None means the whole function

    def sort_key(self):
        return (self.function, self.value, self.reason, self.start is not None, self.start or InstrRef("", "", 0))


def _overlaps_lock(types, type_id: str, start: int, end: int) -> bool:
    return any(lo < end and start < hi for lo, hi in types.lock_ranges(type_id))


def _lock_init_roots(fi, extractor, ins) -> set[str]:
    types = extractor.types
    addr = ins.operands[1]
    roots = set()
    for t in extractor.address_traces(fi, addr):
        f = extractor.field_decl(t.steps[-1])
        if f is not None and (f.is_lock or _overlaps_lock(types, t.steps[-1].type_id, f.offset, f.end)):
            roots.add(t.root)
    # raw byte stores (memset-like initialisation) into the lock's bytes
    base, offset = extractor._root_pointer(fi, addr)
    vt = fi.vtypes.get(base) if is_local(base) else None
    if vt and vt.startswith("*") and vt[1:] in types.structs and _overlaps_lock(types, vt[1:], offset, offset + 1):
        roots.add(base)
    return {r for r in roots if r is not None}


def taint_init_cleanup(program, cg, extractor, info: AllocInfo) -> frozenset[TaintedObject]:
    out: set[TaintedObject] = set()
    for fi in program.functions():
        for ref, ins in fi.instrs:
            if ins.opcode == "store" and not ins.atomic:
                for root in _lock_init_roots(fi, extractor, ins):
                    out.add(TaintedObject(fi.name, root, "lock-initialized"))
            elif ins.opcode == "alloc" and ins.result:
                out.add(TaintedObject(fi.name, ins.result, "freshly-allocated"))
            elif ins.is_call:
                targets = cg.callees(ref)
                if ins.result and targets & info.alloc:
                    out.add(TaintedObject(fi.name, ins.result, "freshly-allocated"))
                args = ins.call_args
                for t in targets:
                    for j in info.dealloc.get(t, ()):
                        if j < len(args):
                            for _, root in extractor.object_traces(fi, args[j]):
                                if root is not None:
                                    out.add(TaintedObject(fi.name, root, "being-deallocated", ref))
            if ins.opcode == "free":
                for _, root in extractor.object_traces(fi, ins.operands[0]):
                    if root is not None:
                        out.add(TaintedObject(fi.name, root, "being-deallocated", ref))
    return frozenset(out)


class TaintIndex:
    """Answers whether an access is rooted at a tainted object in scope."""

    def __init__(self, program, taints: Iterable[TaintedObject]):
        self.program = program
        self.by_root: dict[tuple[str, str], list[TaintedObject]] = {}
        for t in sorted(taints, key=TaintedObject.sort_key):
            self.by_root.setdefault((t.function, t.value), []).append(t)
        self._after: dict[InstrRef, set[str]] = {}

    def _blocks_after(self, ref: InstrRef) -> set[str]:
        if ref not in self._after:
            cfg = self.program.index[ref.function].cfg
            out: set[str] = set()
            for s in cfg.succ[ref.block]:
                out |= cfg.reachable_from(s)
            self._after[ref] = out
        return self._after[ref]

    def covers(self, access) -> TaintedObject | None:
        for t in self.by_root.get((access.instr.function, access.root), ()):
            if t.start is None:
                return t
            a = access.instr
            if (a.block == t.start.block and a.index > t.start.index) or a.block in self._blocks_after(t.start):
                return t
        return None


# -- unlocked check, locked recheck ---------------------------------------------------

class RecheckDetector:
    def __init__(self, program, cg, coverage, records: Iterable[AccessRecord], call_depth: int = 3):
        self.program = program
        self.cg = cg
        self.coverage = coverage
        self.call_depth = call_depth
        self.by_instr: dict[InstrRef, list[AccessRecord]] = {}
        for r in records:
            self.by_instr.setdefault(r.instr, []).append(r)

    def _guarded_regions(self, fi, value: str) -> list[list[str]]:
        """Block sets controlled by a branch on a comparison of ``value``."""
        values = {value}
        todo = [value]
        while todo:
            for _, u in fi.uses.get(todo.pop(), ()):
                if u.opcode == "cast" and u.result not in values:
                    values.add(u.result)
                    todo.append(u.result)
        regions = []
        for v in sorted(values):
            for _, cmp in fi.uses.get(v, ()):
                if cmp.opcode != "cmp":
                    continue
                for bref, br in fi.uses.get(cmp.result, ()):
                    if br.opcode != "br" or len(br.targets) != 2:
                        continue
                    for t in br.targets:
                        if fi.cfg.pred[t] == (bref.block,) and t in fi.cfg.reachable:
                            regions.append(fi.cfg.dominated_by(t))
        return regions

    def _search(self, fi, blocks, rule: PotentialRule, extra: frozenset, depth: int, seen: set) -> bool:
        for label in blocks:
            for i, ins in enumerate(fi.fn.block(label).instrs):
                ref = InstrRef(fi.name, label, i)
                for r in self.by_instr.get(ref, ()):
                    if r.chain.implies(rule.field) and (rule.lock in r.locks or rule.lock in extra):
                        return True
                if ins.is_call and depth < self.call_depth:
                    here = extra | implication_closed(self.coverage.locks_at(ref))
                    for t in sorted(self.cg.callees(ref)):
                        callee = self.program.index.get(t)
                        if callee is None or (t, here) in seen:
                            continue
                        seen.add((t, here))
                        body = [b for b in callee.cfg.blocks if b in callee.cfg.reachable]
                        if self._search(callee, body, rule, here, depth + 1, seen):
                            return True
        return False

    def is_recheck(self, violation) -> bool:
        a = violation.access
        if a.kind != "read":
            return False
        fi = self.program.index[a.instr.function]
        ins = fi.by_ref[a.instr]
        if ins.result is None:
            return False
        for region in self._guarded_regions(fi, ins.result):
            if self._search(fi, region, violation.rule, frozenset(), 0, set()):
                return True
        return False


def is_recheck(violation, program, cg, coverage, records, call_depth: int = 3) -> bool:
    return RecheckDetector(program, cg, coverage, records, call_depth).is_recheck(violation)


# -- safe functions -------------------------------------------------------------

def escape_targets(access, cg) -> frozenset[str]:
    if access.callee == "<indirect>":
        return cg.callees(access.instr)
    return frozenset({access.callee}) if access.callee else frozenset()


def detect_safe_functions(program, cg, coverage, accesses, fraction: Fraction = Fraction(1, 10)) -> frozenset[str]:
    """Functions whose call sites almost never build pointer arguments
    while a lock is held (locked share strictly below ``fraction``)."""
    locked_sites: set[InstrRef] = set()
    for a in accesses:
        if a.kind != "escape":
            continue
        at = a.origin if a.origin is not None else a.instr
        if coverage.locks_at(at) or coverage.locks_at(a.instr):
            locked_sites.add(a.instr)
    sites_of: dict[str, set[InstrRef]] = {}
    for site, targets in cg.edges.items():
        if not coverage.reachable(site):
            continue
        for t in targets:
            sites_of.setdefault(t, set()).add(site)
    safe = set()
    for name, sites in sorted(sites_of.items()):
        locked = sum(1 for s in sites if s in locked_sites)
        if Fraction(locked, len(sites)) < fraction:
            safe.add(name)
    return frozenset(safe)


def escapes_only_into(access, cg, functions: frozenset[str]) -> bool:
    targets = escape_targets(access, cg)
    return access.kind == "escape" and bool(targets) and targets <= functions


# -- write-or-escape -----------------------------------------------------------

def write_or_escape_filter(rules: dict[tuple, PotentialRule], records: Iterable[AccessRecord], cg=None,
                           safe: frozenset[str] = frozenset()) -> dict[tuple, PotentialRule]:
    """Keep rules with a locked write or an escape into a non-safe function."""
    records = list(records)
    kept = {}
    for key, rule in rules.items():
        for r in records:
            if r.chain.partial or not r.chain.implies(rule.field):
                continue
            a = r.access
            if a.kind == "write" and rule.lock in r.locks:
                kept[key] = rule
                break
            if a.kind == "escape" and not (cg is not None and escapes_only_into(a, cg, safe)):
                kept[key] = rule
                break
    return kept
