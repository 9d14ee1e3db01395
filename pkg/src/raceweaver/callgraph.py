"""Call graph construction with structural indirect-call resolution.

Indirect calls are resolved in three tiers:

1. the callee value traces (through phi, select, cast and a field stored
   earlier in the same function) to constant function references only: the
   call targets exactly those functions;
2. otherwise every address-taken function whose structural signature fits
   the call site is a target;
3. functions whose only address-taking uses are casts feeding an indirect
   call's callee slot do not count as address-taken.
"""

from __future__ import annotations

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field

from raceweaver.kir import InstrRef, Module, TypeTable, is_local, is_symbol
from raceweaver.kir.model import SCALAR_KINDS, StructLayout

log = logging.getLogger(__name__)

EXTERNAL_PREFIX = "<extern>"
WILDCARD = "?"


def _digest(shape: tuple) -> str:
    return hashlib.sha256(repr(shape).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class StructuralTypeId:
    """Name-independent identity of a layout.

    Hashing uses the digest; equality always compares the full shape, so a
    digest collision can never merge two different layouts.
    """

    digest: str
    shape: tuple

    def __eq__(self, other: object) -> bool:
        return isinstance(other, StructuralTypeId) and self.shape == other.shape

    def __hash__(self) -> int:
        return hash(self.digest)

    def __str__(self) -> str:
        return self.digest


def _elem_shape(elem: str, is_lock: bool, table: TypeTable, active: frozenset[str]):
    if is_lock:
        return ("lock",)
    if elem.startswith("*"):
        return ("ptr",)  # pointees are opaque, so self-reference terminates
    if elem in SCALAR_KINDS:
        return (elem,)
    layout = table.get(elem)
    if layout is None:
        raise KeyError(f"unresolvable nested type {elem!r}")
    if elem in active:
        raise ValueError(f"type {elem!r} contains itself inline")
    return ("inline", _layout_shape(layout, table, active | {elem}))


def _layout_shape(layout: StructLayout, table: TypeTable, active: frozenset[str] = frozenset()) -> tuple:
    fields = tuple((f.offset, f.size, _elem_shape(f.elem, f.is_lock, table, active)) for f in layout.fields)
    return (layout.total_size, fields)


def structural_type_id(layout: StructLayout, table: TypeTable) -> StructuralTypeId:
    shape = _layout_shape(layout, table, frozenset({layout.type_id}))
    return StructuralTypeId(_digest(shape), shape)


def canonical_type_names(table: TypeTable) -> dict[str, str]:
    """Map each type id to the smallest id among its structural duplicates."""
    classes: dict[StructuralTypeId, list[str]] = defaultdict(list)
    for name in sorted(table.structs):
        classes[structural_type_id(table.structs[name], table)].append(name)
    return {name: members[0] for members in classes.values() for name in members}


# -- signatures ---------------------------------------------------------------

def value_shape(vtype: str | None, table: TypeTable):
    """Coarse structural shape of a value type; ``WILDCARD`` when unknown."""
    if vtype is None or vtype == "ptr":
        return WILDCARD
    if vtype.startswith("*"):
        inner = vtype[1:]
        layout = table.get(inner)
        if layout is not None:
            return ("ptr", structural_type_id(layout, table).digest)
        return ("ptr", inner if inner in SCALAR_KINDS else WILDCARD)
    if vtype in SCALAR_KINDS:
        return vtype
    layout = table.get(vtype)
    return ("agg", structural_type_id(layout, table).digest) if layout else WILDCARD


def shapes_compatible(a, b) -> bool:
    if a == WILDCARD or b == WILDCARD:
        return True
    if isinstance(a, tuple) and isinstance(b, tuple) and a[0] == b[0] == "ptr":
        return a[1] == WILDCARD or b[1] == WILDCARD or a[1] == b[1]
    return a == b


def signature_matches(params: tuple, args: tuple) -> bool:
    return len(params) == len(args) and all(shapes_compatible(p, a) for p, a in zip(params, args))


# -- call graph ---------------------------------------------------------------

@dataclass
class CallGraph:
    edges: dict[InstrRef, frozenset[str]] = field(default_factory=dict)
    callers: dict[str, frozenset[InstrRef]] = field(default_factory=dict)
    address_taken: frozenset[str] = frozenset()
    naive_address_taken: frozenset[str] = frozenset()
    naive_targets: dict[InstrRef, frozenset[str]] = field(default_factory=dict)
    exact_sites: frozenset[InstrRef] = frozenset()
    defined: frozenset[str] = frozenset()

    def callees(self, site: InstrRef) -> frozenset[str]:
        return self.edges.get(site, frozenset())

    def call_sites_of(self, fn: str) -> list[InstrRef]:
        return sorted(self.callers.get(fn, ()))

    def sites_in(self, fn: str) -> list[InstrRef]:
        return sorted(s for s in self.edges if s.function == fn)

    def is_external(self, name: str) -> bool:
        return name not in self.defined

    def dump(self) -> str:
        lines = sorted(
            f"{site.function} -> {callee} @{site}"
            for site, targets in self.edges.items()
            for callee in targets
        )
        return "\n".join(lines) + ("\n" if lines else "")


def _pruned_address_taken(program) -> tuple[set[str], set[str]]:
    """(naive, pruned) address-taken sets."""
    naive: set[str] = set()
    taken: set[str] = set()
    functions = program.module.functions
    for fi in program.functions():
        for ref, ins in fi.instrs:
            for pos, op in enumerate(ins.operands):
                if not is_symbol(op) or op[1:] not in functions:
                    continue
                name = op[1:]
                naive.add(name)
                if ins.opcode == "icall" and pos == 0:
                    continue
                if ins.opcode == "cast" and ins.result and all(
                    u.opcode == "icall" and u.operands[0] == ins.result and ins.result not in u.operands[1:]
                    for _, u in fi.uses.get(ins.result, ())
                ):
                    continue
                taken.add(name)
    return naive, taken


class _Resolver:
    def __init__(self, program, extractor):
        self.program = program
        self.extractor = extractor
        self.functions = program.module.functions

    def constants(self, fi, v: str, allow_field: bool = True, seen=None) -> frozenset[str] | None:
        """Function names ``v`` may hold, or ``None`` when not all constant."""
        seen = set() if seen is None else seen
        if is_symbol(v):
            return frozenset({v[1:]}) if v[1:] in self.functions else None
        if not is_local(v) or v in seen:
            return None if not is_local(v) else frozenset()
        seen.add(v)
        ins = fi.defs.get(v)
        if ins is None:
            return None
        if ins.opcode in ("phi", "select"):
            ops = ins.operands if ins.opcode == "phi" else ins.operands[1:]
            out: set[str] = set()
            for o in ops:
                sub = self.constants(fi, o, allow_field, seen)
                if sub is None:
                    return None
                out |= sub
            return frozenset(out)
        if ins.opcode == "cast":
            return self.constants(fi, ins.operands[0], allow_field, seen)
        if ins.opcode == "load" and allow_field:
            return self._field_constants(fi, ins.operands[0])
        return None

    def _field_constants(self, fi, addr: str) -> frozenset[str] | None:
        wanted = {(t.steps, t.root) for t in self.extractor.address_traces(fi, addr)}
        if not wanted:
            return None
        out: set[str] = set()
        found = False
        for _, ins in fi.instrs:
            if ins.opcode != "store":
                continue
            got = {(t.steps, t.root) for t in self.extractor.address_traces(fi, ins.operands[1])}
            if not got & wanted:
                continue
            found = True
            sub = self.constants(fi, ins.operands[0], allow_field=False)
            if sub is None:
                return None
            out |= sub
        return frozenset(out) if found else None


def build_call_graph(program) -> CallGraph:
    """Build the call graph of a :class:`~raceweaver.program.Program`
    (a bare :class:`Module` is wrapped automatically)."""
    from raceweaver.fields import FieldExtractor
    from raceweaver.program import Program

    if isinstance(program, Module):
        program = Program(program)
    table = program.types
    functions = program.module.functions
    naive_taken, taken = _pruned_address_taken(program)
    resolver = _Resolver(program, FieldExtractor(program))
    param_shapes = {
        name: tuple(value_shape(p.elem, table) for p in fn.params) for name, fn in functions.items()
    }

    edges: dict[InstrRef, frozenset[str]] = {}
    naive_targets: dict[InstrRef, frozenset[str]] = {}
    exact: set[InstrRef] = set()
    for fi in program.functions():
        for ref, ins in fi.instrs:
            if ins.opcode == "call":
                edges[ref] = frozenset({ins.callee})
            elif ins.opcode == "icall":
                args = tuple(value_shape(fi.vtypes.get(a) if is_local(a) else None, table)
                             for a in ins.call_args)
                consts = resolver.constants(fi, ins.operands[0])
                naive = frozenset(
                    f for f in naive_taken if signature_matches(param_shapes[f], args)
                ) | (consts or frozenset())
                naive_targets[ref] = naive
                if consts is not None:
                    edges[ref] = consts
                    exact.add(ref)
                else:
                    edges[ref] = frozenset(f for f in taken if signature_matches(param_shapes[f], args))
    callers: dict[str, set[InstrRef]] = defaultdict(set)
    for site, targets in edges.items():
        for t in targets:
            callers[t].add(site)
    return CallGraph(
        edges=edges,
        callers={k: frozenset(v) for k, v in sorted(callers.items())},
        address_taken=frozenset(taken),
        naive_address_taken=frozenset(naive_taken),
        naive_targets=naive_targets,
        exact_sites=frozenset(exact),
        defined=frozenset(functions),
    )
